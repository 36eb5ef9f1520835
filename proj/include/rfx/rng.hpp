#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace rfx {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for stream `stream` of a run seeded with `seed`. Streams never overlap
/// in practice, so parallel jobs can each own one.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

// std::uniform_real_distribution is implementation-defined; this is not.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double standard_normal(Rng& rng) {
    // Box-Muller, discarding the second variate to keep the stream stateless.
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline double standard_exponential(Rng& rng) {
    double u = uniform01(rng);
    while (u <= 0.0) u = uniform01(rng);
    return -std::log(u);
}

inline int uniform_int(Rng& rng, int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: empty range");
    return static_cast<int>(uniform01(rng) * n) % n;
}

/// Inverse-CDF draw from a probability vector. The caller validates the
/// vector; tiny round-off in the total is absorbed by the last nonzero entry.
inline int sample_categorical(std::span<const double> p, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    int last = -1;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i];
        last = static_cast<int>(i);
        if (u < acc) return last;
    }
    if (last < 0) throw std::invalid_argument("sample_categorical: no mass");
    return last;
}

}  // namespace rfx
