#pragma once

// Seeded generators for evaluation instances.
//
//   dirichlet  every basis row is a flat Dirichlet draw.
//   needle     a chain where only the far end is informative: below the
//              needle state all basis kernels agree, so theta is identifiable
//              only from data gathered at the end of the chain. The action
//              that advances along the chain is drawn per state.
//   hetero     basis rows alternate between near-deterministic and diffuse
//              distributions, giving state-action pairs very different
//              one-step variances.

#include <string>
#include <vector>

#include "rfx/core.hpp"
#include "rfx/rng.hpp"

namespace rfx {

struct InstanceSpec {
    int S = 3, A = 2, H = 3, d = 2;
    std::uint64_t seed = 0;
    std::string family = "dirichlet";

    bool operator==(const InstanceSpec&) const = default;
};

namespace detail {

inline Vec dirichlet(int n, Rng& rng, double concentration = 1.0) {
    // Integer concentrations only (sum of exponentials); enough for the
    // families below and reproducible across standard libraries.
    const int shape = std::max(1, static_cast<int>(std::lround(concentration)));
    Vec x(n);
    for (int i = 0; i < n; ++i) {
        double g = 0.0;
        for (int j = 0; j < shape; ++j) g += standard_exponential(rng);
        x[i] = g;
    }
    return x / x.sum();
}

inline Vec sparse_distribution(int n, std::span<const int> support, Rng& rng) {
    Vec p = Vec::Zero(n);
    const Vec w = dirichlet(static_cast<int>(support.size()), rng);
    for (std::size_t i = 0; i < support.size(); ++i) p[support[i]] += w[i];
    return p;
}

inline std::vector<Vec> draw_thetas(int H, int d, Rng& rng) {
    std::vector<Vec> th;
    th.reserve(H);
    for (int h = 0; h < H; ++h) th.push_back(dirichlet(d, rng, 2.0) * std::sqrt(double(d)));
    return th;
}

inline MixtureInstance make_dirichlet(const InstanceSpec& sp, Rng& rng) {
    std::vector<Mat> basis(sp.d, Mat(sp.S * sp.A, sp.S));
    for (int i = 0; i < sp.d; ++i)
        for (int sa = 0; sa < sp.S * sp.A; ++sa)
            basis[i].row(sa) = dirichlet(sp.S, rng).transpose();
    auto th = draw_thetas(sp.H, sp.d, rng);
    return MixtureInstance(sp.S, sp.A, sp.H, std::move(basis), std::move(th),
                           Vec::Unit(sp.S, 0), "dirichlet", sp.seed);
}

inline MixtureInstance make_hetero(const InstanceSpec& sp, Rng& rng) {
    std::vector<Mat> basis(sp.d, Mat(sp.S * sp.A, sp.S));
    for (int sa = 0; sa < sp.S * sp.A; ++sa) {
        const bool low_variance = (sa % 2) == 0;
        for (int i = 0; i < sp.d; ++i) {
            Vec p;
            if (low_variance) {
                p = Vec::Constant(sp.S, 0.02 / sp.S);
                p[uniform_int(rng, sp.S)] += 0.98;
            } else {
                p = dirichlet(sp.S, rng, 4.0);
            }
            basis[i].row(sa) = (p / p.sum()).transpose();
        }
    }
    auto th = draw_thetas(sp.H, sp.d, rng);
    return MixtureInstance(sp.S, sp.A, sp.H, std::move(basis), std::move(th),
                           Vec::Unit(sp.S, 0), "hetero", sp.seed);
}

inline MixtureInstance make_needle(const InstanceSpec& sp, Rng& rng) {
    const int S = sp.S, A = sp.A, H = sp.H, d = sp.d;
    if (S < 3 || H < 2) {
        // Too small for a chain; fall back to random rows but keep the label.
        auto inst = make_dirichlet(sp, rng);
        inst.family = "needle";
        return inst;
    }
    const int sink = S - 1;
    const int needle = std::min(S - 3, H - 2);
    std::vector<int> advance(S);
    for (int s = 0; s < S; ++s) advance[s] = uniform_int(rng, A);

    std::vector<Mat> basis(d, Mat::Zero(S * A, S));
    // Shared part: the chain below the needle plus the sink.
    for (int s = 0; s < S; ++s) {
        for (int a = 0; a < A; ++a) {
            Vec p = Vec::Zero(S);
            if (s < needle) {
                if (a == advance[s]) {
                    p[s + 1] = 0.9;
                    p[0] += 0.1;
                } else {
                    p[0] = 0.9;
                    p[sink] = 0.1;
                }
            } else if (s == sink) {
                p[sink] = 0.8;
                p[0] = 0.2;
            } else {
                continue;  // informative region, filled per component below
            }
            for (int i = 0; i < d; ++i) basis[i].row(s * A + a) = p.transpose();
        }
    }
    // Informative region: the needle state and the goal states past it. Each
    // component routes the pair differently across goals and the sink.
    std::vector<int> succ;
    for (int s = needle + 1; s < S; ++s) succ.push_back(s);
    for (int s = needle; s < sink; ++s)
        for (int a = 0; a < A; ++a)
            for (int i = 0; i < d; ++i) {
                Vec p = sparse_distribution(S, succ, rng);
                // Lean each component toward a different successor.
                p[succ[(i + a + s) % succ.size()]] += 1.0;
                basis[i].row(s * A + a) = (p / p.sum()).transpose();
            }
    auto th = draw_thetas(H, d, rng);
    return MixtureInstance(S, A, H, std::move(basis), std::move(th), Vec::Unit(S, 0), "needle",
                           sp.seed);
}

}  // namespace detail

inline MixtureInstance generate_instance(const InstanceSpec& sp) {
    if (sp.S < 1 || sp.A < 1 || sp.H < 1 || sp.d < 1)
        throw UsageError("generate_instance: S, A, H, d must be >= 1");
    Rng rng(derive_seed(sp.seed, 0x1257));
    if (sp.family == "dirichlet") return detail::make_dirichlet(sp, rng);
    if (sp.family == "needle") return detail::make_needle(sp, rng);
    if (sp.family == "hetero") return detail::make_hetero(sp, rng);
    throw UsageError("generate_instance: unknown family '" + sp.family + "'");
}

}  // namespace rfx
