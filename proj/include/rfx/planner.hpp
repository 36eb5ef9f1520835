#pragma once

// Planning on an estimated model, gap evaluation on the true one, and the
// truncated optimal value used by the optimism checks.

#include <cmath>
#include <limits>
#include <vector>

#include "rfx/core.hpp"

namespace rfx {

struct PlanCertificate {
    double eps_opt = 0.0;
    double bound = 0.0;             // certified suboptimality on the planning model
    std::vector<double> step_slack;  // max_s (max_a Q - Q(s, pi(s))) per step
};

struct PluginPlan {
    Policy policy;
    std::vector<Vec> V;  // value of `policy` on the planning model
    double start_value = 0.0;
    PlanCertificate certificate;
};

/// eps_opt-optimal planner. eps_opt == 0 is exact backward induction.
///
/// For eps_opt > 0 actions are compared after flooring Q to multiples of
/// g = eps_opt / H, so the chosen action loses at most g per step against
/// the best one given the policy's own continuation values W_{h+1}. Because
/// W_h = Q_h(., pi) is the policy's exact value,
///   ||V*_h - W_h||_inf <= slack_h + ||V*_{h+1} - W_{h+1}||_inf,  slack_h < g,
/// which telescopes to V*_1 - W_1 <= sum_h slack_h <= H g = eps_opt. The
/// certificate reports that sum.
inline PluginPlan plugin_plan(const TabularModel& m, const Reward& R, double eps_opt = 0.0) {
    check_reward_shape(m, R);
    if (eps_opt < 0.0) throw UsageError("plugin_plan: eps_opt must be nonnegative");
    for (int h = 0; h < m.H; ++h)
        for (int sa = 0; sa < m.S * m.A; ++sa) {
            const auto row = m.P[h].row(sa);
            if (row.minCoeff() < -kModelTol || std::abs(row.sum() - 1.0) > kModelTol)
                throw UsageError("plugin_plan: invalid model");
        }
    PluginPlan out;
    out.policy = Policy(m.H, m.S);
    out.V.assign(m.H + 1, Vec::Zero(m.S));
    out.certificate.eps_opt = eps_opt;
    out.certificate.step_slack.assign(m.H, 0.0);
    const double grain = m.H > 0 && eps_opt > 0.0 ? eps_opt / m.H : 0.0;
    std::vector<double> q(m.A);
    for (int h = m.H - 1; h >= 0; --h) {
        double slack = 0.0;
        for (int s = 0; s < m.S; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < m.A; ++a) {
                q[a] = R(h, s, a) + m.expect(h, s, a, out.V[h + 1]);
                best = std::max(best, q[a]);
            }
            int arg = 0;
            if (grain > 0.0) {
                double best_key = -std::numeric_limits<double>::infinity();
                for (int a = 0; a < m.A; ++a) {
                    const double key = std::floor(q[a] / grain);
                    if (key > best_key) {
                        best_key = key;
                        arg = a;
                    }
                }
            } else {
                for (int a = 1; a < m.A; ++a)
                    if (q[a] > q[arg]) arg = a;
            }
            out.policy(h, s) = arg;
            out.V[h][s] = q[arg];
            slack = std::max(slack, best - q[arg]);
        }
        out.certificate.step_slack[h] = slack;
        out.certificate.bound += slack;
    }
    out.start_value = m.init.dot(out.V[0]);
    return out;
}

/// V*_1(s1, R) - V^pi_1(s1, R) on the given (true) model.
inline double suboptimality_gap(const TabularModel& truth, const Reward& R, const Policy& pi) {
    const double best = optimal_policy_dp(truth, R).start_value;
    const double got = evaluate_policy(truth, R, pi).start_value;
    return best - got;
}

/// Optimal value with the running value clipped at H after every step:
///   V_h(s) = max_a min{R_h(s,a) + P_h V_{h+1}(s,a), H}.
/// Rewards may exceed one (exploration bonuses).
inline std::vector<Vec> truncated_optimal_value(const TabularModel& truth, const Reward& R) {
    check_reward_shape(truth, R);
    const double cap = static_cast<double>(truth.H);
    std::vector<Vec> V(truth.H + 1, Vec::Zero(truth.S));
    for (int h = truth.H - 1; h >= 0; --h)
        for (int s = 0; s < truth.S; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < truth.A; ++a)
                best = std::max(best, std::min(R(h, s, a) + truth.expect(h, s, a, V[h + 1]), cap));
            V[h][s] = best;
        }
    return V;
}

}  // namespace rfx
