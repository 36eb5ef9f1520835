#pragma once

// Quick invariant suite behind `rfx verify`: small randomized versions of the
// structural checks, meant to finish in seconds.

#include <cmath>
#include <string>
#include <vector>

#include "rfx/bernstein.hpp"
#include "rfx/harness.hpp"
#include "rfx/hoeffding.hpp"
#include "rfx/instances.hpp"
#include "rfx/planner.hpp"
#include "rfx/regression.hpp"
#include "rfx/rewards.hpp"
#include "rfx/serialize.hpp"

namespace rfx {

struct InvariantCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

inline InvariantCheck check_planner(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 1));
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const InstanceSpec sp{2 + uniform_int(rng, 3), 1 + uniform_int(rng, 3), 1 + uniform_int(rng, 3),
                              1 + uniform_int(rng, 3), derive_seed(seed, 100 + i), "dirichlet"};
        const auto inst = generate_instance(sp);
        const Reward R = random_reward(sp.H, sp.S, sp.A, rng);
        const double a = plugin_plan(inst.true_model(), R).start_value;
        const double b = enumerate_policies_oracle(inst.true_model(), R);
        worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(b)));
    }
    return {"planner matches policy enumeration", worst <= 1e-12, "max relative error " + format_double(worst)};
}

inline InvariantCheck check_inverse(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 2));
    const int d = 8;
    CovarianceAccumulator acc(d, 0.5);
    for (int t = 0; t < 2000; ++t) {
        Vec x(d);
        for (int i = 0; i < d; ++i) x[i] = standard_normal(rng);
        acc.update(x / std::max(1.0, x.norm()), 0.0);
    }
    const Mat direct = acc.covariance().inverse();
    const double rel = (acc.inverse() - direct).norm() / direct.norm();
    return {"incremental inverse tracks direct inverse", rel <= 1e-8, "relative Frobenius " + format_double(rel)};
}

inline InvariantCheck check_relaxation(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 3));
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const int S = 2 + uniform_int(rng, 5), d = 1 + uniform_int(rng, 4), H = 1 + uniform_int(rng, 3);
        Mat F(d, S);
        for (auto& x : F.reshaped()) x = uniform01(rng) / std::sqrt(double(d));
        CovarianceAccumulator acc(d, 1.0);
        for (int t = 0; t < 5; ++t) {
            Vec x(d);
            for (int j = 0; j < d; ++j) x[j] = standard_normal(rng);
            acc.update(x, 0.0);
        }
        const auto root = inverse_root(acc);
        const double relaxed = max_uncertainty(F, root, H, UncertaintyMode::Relaxed).score;
        const double exact = max_uncertainty(F, root, H, UncertaintyMode::Exact).score;
        worst = std::max(worst, exact - relaxed);
    }
    return {"relaxed uncertainty dominates box vertices", worst <= 1e-12,
            "max shortfall " + format_double(worst)};
}

inline InvariantCheck check_runs(std::uint64_t seed) {
    const auto inst = generate_instance({3, 2, 3, 2, seed, "needle"});
    std::string why;
    bool ok = true;
    // Loewner monotonicity of a fixed probe through a Hoeffding run.
    HoeffdingConfig hc;
    hc.K = 40;
    Rng rng(derive_seed(seed, 4));
    const Vec probe = Vec::Constant(inst.d, 1.0 / std::sqrt(double(inst.d)));
    std::vector<double> last(inst.H, std::numeric_limits<double>::infinity());
    const auto hr = run_hoeffding(hc, inst, rng, [&](int, const OptimisticPass&, const HoeffdingState& st, const Trajectory&) {
        for (int h = 0; h < inst.H; ++h) {
            const double n = st.acc[h].elliptical_norm(probe);
            if (n > last[h] + 1e-12) ok = false, why = "probe norm increased";
            last[h] = n;
        }
    });
    if (!validate_model(inst, hr.model.theta).pass) ok = false, why = "hoeffding model invalid";
    BernsteinConfig bc;
    bc.K = 12;
    Rng rng2(derive_seed(seed, 5));
    double ymax = 0.0;
    const auto br = run_bernstein(bc, inst, rng2);
    for (const auto& e : br.episodes) ymax = std::max(ymax, e.y_tilde_max);
    if (ymax > double(inst.H) * inst.H + 1e-9) ok = false, why = "Y~ exceeds H^2";
    if (!validate_model(inst, br.model.theta).pass) ok = false, why = "bernstein model invalid";
    return {"exploration runs: monotone norms, valid models, Y~ <= H^2", ok, ok ? "ok" : why};
}

inline InvariantCheck check_roundtrip(std::uint64_t seed) {
    const auto inst = generate_instance({3, 2, 2, 2, seed, "dirichlet"});
    HoeffdingConfig hc;
    hc.K = 8;
    Rng rng(derive_seed(seed, 6));
    const auto m = run_hoeffding(hc, inst, rng).model;
    const bool model_ok = deserialize_model(serialize_model(m)) == m;
    const auto inst2 = deserialize_instance(serialize_instance(inst));
    bool inst_ok = inst2.S == inst.S && inst2.theta.size() == inst.theta.size();
    for (std::size_t h = 0; inst_ok && h < inst.theta.size(); ++h) inst_ok = inst2.theta[h] == inst.theta[h];
    for (int i = 0; inst_ok && i < inst.d; ++i) inst_ok = inst2.basis[i] == inst.basis[i];
    std::string bytes = serialize_model(m);
    bytes.resize(bytes.size() / 2);
    bool truncated_rejected = false;
    try {
        (void)deserialize_model(bytes);
    } catch (const CorruptionError&) {
        truncated_rejected = true;
    }
    const bool ok = model_ok && inst_ok && truncated_rejected;
    return {"persistence round-trips and rejects truncation", ok, ok ? "ok" : "round-trip mismatch"};
}

inline InvariantCheck check_determinism(std::uint64_t seed) {
    RunConfig c;
    c.K = {8, 16};
    c.seeds = {seed, seed + 1, seed + 2};
    c.instance = {4, 2, 3, 2, seed, "needle"};
    const auto a = results_csv(run_sweep(c, 1));
    const auto b = results_csv(run_sweep(c, 3));
    return {"sweep output independent of worker count", a == b, a == b ? "ok" : "CSV bytes differ"};
}

}  // namespace detail

inline std::vector<InvariantCheck> run_invariant_suite(std::uint64_t seed = 0) {
    return {detail::check_planner(seed), detail::check_inverse(seed), detail::check_relaxation(seed),
            detail::check_runs(seed), detail::check_roundtrip(seed), detail::check_determinism(seed)};
}

}  // namespace rfx
