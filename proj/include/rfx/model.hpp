#pragma once

// Output of an exploration run: one mixing vector per step defining the
// kernel handed to the planner, plus enough provenance to audit it.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rfx/core.hpp"

namespace rfx {

/// 64-bit FNV-1a over bytes.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t x) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, x >>= 4) s[i] = digits[x & 0xf];
    return s;
}

struct EstimatedModel {
    std::string algorithm;
    int K = 0;
    std::string config_digest;
    std::vector<Vec> theta;           // scaled view, one per step
    std::vector<double> slack;        // ||theta_tilde - center||_Lambda per step
    double beta = 0.0;                // radius the slack is compared against
    std::vector<std::string> flags;   // e.g. "slack-exceeds-beta", "solver-fallback"

    bool has_flag(std::string_view f) const {
        for (const auto& x : flags)
            if (x == f) return true;
        return false;
    }
    void add_flag(std::string f) {
        if (!has_flag(f)) flags.push_back(std::move(f));
    }

    bool operator==(const EstimatedModel& o) const {
        if (algorithm != o.algorithm || K != o.K || config_digest != o.config_digest ||
            slack != o.slack || beta != o.beta || flags != o.flags || theta.size() != o.theta.size())
            return false;
        for (std::size_t h = 0; h < theta.size(); ++h)
            if (theta[h].size() != o.theta[h].size() || theta[h] != o.theta[h]) return false;
        return true;
    }
};

}  // namespace rfx
