#pragma once

// Planning-phase reward suites.
//
// A suite is a list of families; each family is one or more rewards and its
// reported gap is the worst gap over its members. The "tie-sweep" families
// take a goal reward and shift the first-step reward of one start action so
// that the two best start actions are separated by margins on a geometric
// grid. A planner whose estimated Q-difference at the start is off by e picks
// the wrong action on every member with margin below e, so the family's gap
// tracks e itself instead of collapsing to zero once the single unperturbed
// decision happens to be right.

#include <cmath>
#include <string>
#include <vector>

#include "rfx/core.hpp"
#include "rfx/rng.hpp"

namespace rfx {

struct RewardFamily {
    std::string name;
    std::vector<Reward> members;
};

using RewardSuite = std::vector<RewardFamily>;

/// Reward 1 in state g at the last step, any action.
inline Reward goal_reward(int H, int S, int A, int g) {
    if (g < 0 || g >= S) throw UsageError("goal_reward: state out of range");
    Reward R(H, S, A);
    if (H > 0)
        for (int a = 0; a < A; ++a) R(H - 1, g, a) = 1.0;
    return R;
}

inline Reward random_reward(int H, int S, int A, Rng& rng) {
    Reward R(H, S, A);
    for (auto& x : R.r) x = uniform01(rng);
    return R;
}

struct TieSweepOptions {
    double min_margin = 1e-4;
    double max_margin = 1.0;
    double ratio = 1.1;
};

inline int start_state(const TabularModel& m) {
    int s1 = 0;
    for (int s = 1; s < m.S; ++s)
        if (m.init[s] > m.init[s1]) s1 = s;
    return s1;
}

/// Near-tie perturbations of `base` at the start state. Members whose shifted
/// reward would leave [0,1] are skipped.
inline RewardFamily tie_sweep_family(const TabularModel& truth, const Reward& base, std::string name,
                                     const TieSweepOptions& opt = {}) {
    check_reward_shape(truth, base);
    RewardFamily fam{std::move(name), {}};
    if (truth.H == 0 || truth.A < 2) {
        fam.members.push_back(base);
        return fam;
    }
    const int s1 = start_state(truth);
    const auto opt_plan = optimal_policy_dp(truth, base);
    std::vector<double> q(truth.A);
    for (int a = 0; a < truth.A; ++a)
        q[a] = base(0, s1, a) + truth.expect(0, s1, a, opt_plan.V[1]);
    std::vector<double> margins;
    for (double m = opt.min_margin; m <= opt.max_margin * (1 + 1e-12); m *= opt.ratio)
        margins.push_back(m);
    for (int hi = 0; hi < truth.A; ++hi)
        for (int lo = 0; lo < truth.A; ++lo) {
            if (hi == lo || q[hi] < q[lo] || (q[hi] == q[lo] && hi > lo)) continue;
            const double gap = q[hi] - q[lo];
            for (double m : margins)
                for (double sign : {1.0, -1.0}) {
                    const double r = base(0, s1, lo) + gap + sign * m;
                    if (r < 0.0 || r > 1.0) continue;
                    Reward R = base;
                    R(0, s1, lo) = r;
                    fam.members.push_back(std::move(R));
                }
        }
    if (fam.members.empty()) fam.members.push_back(base);
    return fam;
}

/// Named suites: "goals", "tie-sweep", "random", "empty".
inline RewardSuite make_reward_suite(const std::string& name, const TabularModel& truth,
                                     std::uint64_t seed = 0, int count = 8) {
    RewardSuite suite;
    const int H = truth.H, S = truth.S, A = truth.A;
    if (name == "empty") return suite;
    if (name == "goals") {
        for (int g = 0; g < S; ++g)
            suite.push_back({"goal-" + std::to_string(g), {goal_reward(H, S, A, g)}});
        return suite;
    }
    if (name == "tie-sweep") {
        for (int g = 0; g < S; ++g)
            suite.push_back(tie_sweep_family(truth, goal_reward(H, S, A, g), "tie-goal-" + std::to_string(g)));
        return suite;
    }
    if (name == "random") {
        Rng rng(derive_seed(seed, 0x7e3a));
        for (int i = 0; i < count; ++i)
            suite.push_back({"random-" + std::to_string(i), {random_reward(H, S, A, rng)}});
        return suite;
    }
    throw UsageError("unknown reward suite: " + name);
}

}  // namespace rfx
