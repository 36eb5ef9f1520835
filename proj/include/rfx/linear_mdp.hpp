#pragma once

// Linear MDP variant: P_h(s'|s,a) = <mu_h(s'), phi(s,a)>, R_h(s,a) = <phi(s,a), eta_h>.
//
// Exploration runs least-squares value iteration with the bonus u as the
// reward; planning runs one LSVI pass over the whole dataset for a given
// reward. Regression targets only enter through sums of phi(s,a) V(s') over
// visited transitions, so both phases keep per-step transition counts and a
// Gram matrix instead of replaying the records.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rfx/core.hpp"
#include "rfx/hoeffding.hpp"
#include "rfx/model.hpp"
#include "rfx/regression.hpp"
#include "rfx/rng.hpp"

namespace rfx {

struct LinearMDPInstance {
    int S = 0, A = 0, H = 0, d = 0;
    Mat phi;               // (S*A) x d, row sa = phi(s, a)
    std::vector<Mat> mu;   // per step, d x S: column s' is mu_h(s')
    std::vector<Vec> eta;  // per step reward parameters
    Vec init;
    std::string family = "anchor";
    std::uint64_t seed = 0;

    auto feature(int s, int a) const { return phi.row(s * A + a); }

    TabularModel true_model() const {
        TabularModel m;
        m.S = S;
        m.A = A;
        m.H = H;
        m.init = init;
        m.P.resize(H);
        for (int h = 0; h < H; ++h) m.P[h] = phi * mu[h];
        return m;
    }

    Reward reward() const {
        Reward R(H, S, A);
        for (int h = 0; h < H; ++h)
            for (int s = 0; s < S; ++s)
                for (int a = 0; a < A; ++a) R(h, s, a) = feature(s, a).dot(eta[h]);
        return R;
    }
};

struct LinearMDPCheck {
    double row_residual = 0.0;      // worst |row sum - 1| or negative mass
    double feature_norm = 0.0;      // max ||phi(s,a)||_2
    double measure_norm = 0.0;      // max ||mu_h(s)||_2
    double eta_norm = 0.0;          // max ||eta_h||_2
    double reward_excursion = 0.0;  // distance of R outside [0,1]
    bool pass = true;
};

inline LinearMDPCheck check_linear_mdp(const LinearMDPInstance& inst) {
    LinearMDPCheck c;
    const double root_d = std::sqrt(static_cast<double>(inst.d));
    const auto m = inst.true_model();
    for (int h = 0; h < inst.H; ++h) {
        for (int sa = 0; sa < inst.S * inst.A; ++sa) {
            const auto row = m.P[h].row(sa);
            c.row_residual = std::max({c.row_residual, std::abs(row.sum() - 1.0), -row.minCoeff()});
        }
        for (int s = 0; s < inst.S; ++s) c.measure_norm = std::max(c.measure_norm, inst.mu[h].col(s).norm());
        c.eta_norm = std::max(c.eta_norm, inst.eta[h].norm());
    }
    for (int sa = 0; sa < inst.S * inst.A; ++sa) c.feature_norm = std::max(c.feature_norm, inst.phi.row(sa).norm());
    for (double r : inst.reward().r) c.reward_excursion = std::max({c.reward_excursion, -r, r - 1.0});
    c.pass = c.row_residual <= kDistributionTol && c.feature_norm <= 1.0 + 1e-12 &&
             c.measure_norm <= root_d + 1e-12 && c.eta_norm <= root_d + 1e-12 &&
             c.reward_excursion <= kDistributionTol && std::abs(inst.init.sum() - 1.0) <= kDistributionTol &&
             inst.init.minCoeff() >= 0.0;
    return c;
}

struct LinearInstanceSpec {
    int S = 5, A = 2, H = 4, d = 3;
    std::uint64_t seed = 1;
    std::string family = "anchor";

    bool operator==(const LinearInstanceSpec&) const = default;
};

/// Basis-anchor construction. Pair i (for i < d) has phi = e_i; every other
/// pair gets a flat Dirichlet point on the simplex. Each coordinate i owns a
/// next-state distribution q_{h,i} that puts 0.8 on one drawn state, stored
/// as mu_h(s') = (q_{h,1}(s'), ..., q_{h,d}(s')), so every row is a convex
/// mixture of the q's and values differ across states. Rewards use eta_h in
/// [0,1]^d.
inline LinearMDPInstance generate_linear_instance(const LinearInstanceSpec& sp) {
    if (sp.S < 1 || sp.A < 1 || sp.H < 1 || sp.d < 1)
        throw UsageError("generate_linear_instance: S, A, H, d must be >= 1");
    if (sp.S * sp.A < sp.d) throw UsageError("generate_linear_instance: need S*A >= d anchor pairs");
    if (sp.family != "anchor") throw UsageError("generate_linear_instance: unknown family '" + sp.family + "'");
    Rng rng(derive_seed(sp.seed, 0x11ea));
    auto simplex_point = [&](int n) {
        Vec x(n);
        for (int i = 0; i < n; ++i) x[i] = standard_exponential(rng);
        return Vec(x / x.sum());
    };
    LinearMDPInstance inst;
    inst.S = sp.S;
    inst.A = sp.A;
    inst.H = sp.H;
    inst.d = sp.d;
    inst.family = sp.family;
    inst.seed = sp.seed;
    inst.phi = Mat::Zero(sp.S * sp.A, sp.d);
    for (int sa = 0; sa < sp.S * sp.A; ++sa) {
        if (sa < sp.d)
            inst.phi(sa, sa) = 1.0;
        else
            inst.phi.row(sa) = simplex_point(sp.d).transpose();
    }
    inst.mu.assign(sp.H, Mat(sp.d, sp.S));
    inst.eta.assign(sp.H, Vec(sp.d));
    for (int h = 0; h < sp.H; ++h) {
        for (int i = 0; i < sp.d; ++i) {
            Vec q = 0.2 * simplex_point(sp.S);
            q[uniform_int(rng, sp.S)] += 0.8;
            inst.mu[h].row(i) = q.transpose();
        }
        for (int i = 0; i < sp.d; ++i) inst.eta[h][i] = uniform01(rng);
    }
    inst.init = Vec::Unit(sp.S, 0);
    return inst;
}

struct LinearRecord {
    int episode = 0, step = 0, s = 0, a = 0, next = 0;
    bool operator==(const LinearRecord&) const = default;
};

struct ExplorationDataset {
    int S = 0, A = 0, H = 0, K = 0;
    double beta = 0.0;
    std::string config_digest;
    std::vector<LinearRecord> records;  // episode-major, K * H entries

    bool operator==(const ExplorationDataset&) const = default;
};

/// c_beta * d H sqrt(log(d H / (delta epsilon))).
inline double beta_linear(int d, int H, double delta, double epsilon, double c_beta = 1.0) {
    if (d < 1 || H < 1) throw UsageError("beta_linear: d and H must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw UsageError("beta_linear: delta must be in (0,1)");
    if (!(epsilon > 0.0)) throw UsageError("beta_linear: epsilon must be positive");
    if (!(c_beta > 0.0)) throw UsageError("beta_linear: c_beta must be positive");
    const double arg = static_cast<double>(d) * H / (delta * epsilon);
    return c_beta * d * H * std::sqrt(std::max(0.0, std::log(arg)));
}

struct LinearConfig {
    double c_beta = 1.0;
    double c_K = 1.0;  // only used when K == 0
    double delta = 0.1;
    double epsilon = 0.1;
    int K = 64;  // explicit budget; 0 means c_K d^3 H^4 log(dH/(delta eps)) / eps^2
    TieBreak tie_break = TieBreak::Untruncated;  // exploration only; planning uses lowest index

    void validate() const {
        if (tie_break == TieBreak::Identifiable)
            throw UsageError("LinearConfig: tie_break must be lowest or untruncated");
    }

    int budget(int d, int H) const {
        if (K > 0) return K;
        if (!(c_K > 0.0)) throw UsageError("LinearConfig: c_K must be positive");
        const double L = std::log(static_cast<double>(d) * H / (delta * epsilon));
        const double k = std::ceil(c_K * std::pow(d, 3) * std::pow(H, 4) * std::max(L, 0.0) / (epsilon * epsilon));
        if (k > 1e8) throw UsageError("LinearConfig: theoretical budget too large; set K explicitly");
        return std::max(1, static_cast<int>(k));
    }

    std::string digest() const {
        std::string s = "linear|" + std::to_string(c_beta) + "|" + std::to_string(c_K) + "|" +
                        std::to_string(delta) + "|" + std::to_string(epsilon) + "|" + std::to_string(K) +
                        "|" + to_string(tie_break);
        return hex64(fnv1a(s));
    }
};

/// Per-step sufficient statistics for LSVI: the Gram matrix I + sum phi phi^T
/// and transition counts N_h(sa, s').
struct LsviStatistics {
    std::vector<CovarianceAccumulator> acc;
    std::vector<Mat> counts;

    LsviStatistics(int H, int S, int A, int d) : acc(H, CovarianceAccumulator(d, 1.0)), counts(H, Mat::Zero(S * A, S)) {}

    void add(const LinearMDPInstance& inst, int h, int s, int a, int next) {
        acc[h].update(inst.feature(s, a).transpose(), 0.0);
        counts[h](s * inst.A + a, next) += 1.0;
    }

    /// Lambda_h^{-1} sum_t phi(s_t, a_t) V(s'_t).
    Vec weights(const LinearMDPInstance& inst, int h, const Vec& V_next) const {
        const Vec target = inst.phi.transpose() * (counts[h] * V_next);
        return acc[h].covariance().ldlt().solve(target);
    }
};

struct LsviPass {
    std::vector<Vec> Q;      // per step, S*A, in [0, H]
    std::vector<Vec> V;      // H + 1 tables
    std::vector<Vec> W;      // H + 1 tables, same recursion without the clip
    std::vector<Vec> bonus;  // per step, S*A
    Policy policy;
};

/// Q_h = clip(w^T phi + R + u, 0, H), greedy. With `reward` null the bonus
/// doubles as the reward; `bonus_cap` > 0 clips u.
///
/// With the worst-case beta every exploration Q sits at H for many episodes,
/// and lowest-index ties would then replay one fixed policy. Under
/// TieBreak::Untruncated tied actions are ranked by W_h = w_W^T phi + R + u,
/// with w_W regressed on the unclipped W_{h+1}, then by lowest index.
inline LsviPass lsvi_pass(const LinearMDPInstance& inst, const LsviStatistics& st, double beta,
                          const Reward* reward, double bonus_cap, TieBreak tie_break = TieBreak::Lowest) {
    const int S = inst.S, A = inst.A, H = inst.H;
    const double cap = H;
    LsviPass p;
    p.Q.assign(H, Vec::Zero(S * A));
    p.V.assign(H + 1, Vec::Zero(S));
    p.W.assign(H + 1, Vec::Zero(S));
    p.bonus.assign(H, Vec::Zero(S * A));
    p.policy = Policy(H, S);
    for (int h = H - 1; h >= 0; --h) {
        const Vec w = st.weights(inst, h, p.V[h + 1]);
        const Vec ww = tie_break == TieBreak::Lowest ? w : st.weights(inst, h, p.W[h + 1]);
        const Mat& inv = st.acc[h].inverse();
        for (int s = 0; s < S; ++s) {
            int arg = 0;
            double best_q = 0.0, best_w = 0.0;
            for (int a = 0; a < A; ++a) {
                const int sa = s * A + a;
                const Vec f = inst.phi.row(sa).transpose();
                double u = beta * std::sqrt(std::max(0.0, f.dot(inv * f)));
                if (bonus_cap > 0.0) u = std::min(u, bonus_cap);
                const double r = reward ? (*reward)(h, s, a) : u;
                p.bonus[h][sa] = u;
                p.Q[h][sa] = std::clamp(w.dot(f) + r + u, 0.0, cap);
                const double wv = ww.dot(f) + r + u;
                if (a == 0 || detail::prefer(p.Q[h][sa], wv, best_q, best_w, tie_break)) {
                    best_q = p.Q[h][sa];
                    best_w = wv;
                    arg = a;
                }
            }
            p.policy(h, s) = arg;
            p.V[h][s] = best_q;
            p.W[h][s] = best_w;
        }
    }
    return p;
}

using LinearObserver = std::function<void(int k, const LsviPass&)>;

/// Exploration with R_{k,h} = u_{k,h}. Targets are the current pass's
/// V_{k,h+1} evaluated at every stored successor.
inline ExplorationDataset explore_linear_mdp(const LinearMDPInstance& inst, const LinearConfig& cfg, Rng& rng,
                                             const LinearObserver& observer = {}) {
    if (!check_linear_mdp(inst).pass) throw UsageError("explore_linear_mdp: instance violates the linear MDP assumption");
    cfg.validate();
    const int K = cfg.budget(inst.d, inst.H);
    const double beta = beta_linear(inst.d, inst.H, cfg.delta, cfg.epsilon, cfg.c_beta);
    const TabularModel truth = inst.true_model();
    ExplorationDataset ds;
    ds.S = inst.S;
    ds.A = inst.A;
    ds.H = inst.H;
    ds.K = K;
    ds.beta = beta;
    ds.config_digest = cfg.digest();
    ds.records.reserve(static_cast<std::size_t>(K) * inst.H);
    LsviStatistics st(inst.H, inst.S, inst.A, inst.d);
    for (int k = 0; k < K; ++k) {
        const LsviPass pass = lsvi_pass(inst, st, beta, nullptr, 0.0, cfg.tie_break);
        if (observer) observer(k, pass);
        const Trajectory traj = sample_episode(truth, pass.policy, rng, k);
        for (int h = 0; h < inst.H; ++h) {
            const int s = traj.states[h], a = traj.actions[h], next = traj.states[h + 1];
            ds.records.push_back({k, h, s, a, next});
            st.add(inst, h, s, a, next);
        }
    }
    return ds;
}

inline LsviStatistics dataset_statistics(const LinearMDPInstance& inst, const ExplorationDataset& ds) {
    if (ds.S != inst.S || ds.A != inst.A || ds.H != inst.H)
        throw UsageError("dataset does not match the instance shape");
    LsviStatistics st(inst.H, inst.S, inst.A, inst.d);
    for (const auto& r : ds.records) {
        if (r.step < 0 || r.step >= inst.H || r.s < 0 || r.s >= inst.S || r.a < 0 || r.a >= inst.A ||
            r.next < 0 || r.next >= inst.S)
            throw UsageError("dataset record out of range");
        st.add(inst, r.step, r.s, r.a, r.next);
    }
    return st;
}

/// One LSVI pass with u = min{beta ||phi||_{Lambda^{-1}}, H}, lowest-index ties.
inline Policy plan_linear_mdp(const LinearMDPInstance& inst, const LsviStatistics& st, const Reward& R,
                              double beta) {
    if (R.H != inst.H || R.S != inst.S || R.A != inst.A) throw UsageError("plan_linear_mdp: reward has wrong shape");
    if (!(beta >= 0.0)) throw UsageError("plan_linear_mdp: beta must be nonnegative");
    return lsvi_pass(inst, st, beta, &R, static_cast<double>(inst.H)).policy;
}

/// Planning over the full dataset: Lambda_h and the targets use all K records at step h.
inline Policy plan_linear_mdp(const LinearMDPInstance& inst, const ExplorationDataset& ds, const Reward& R,
                              double beta) {
    if (ds.records.empty()) throw UsageError("plan_linear_mdp: empty dataset");
    return plan_linear_mdp(inst, dataset_statistics(inst, ds), R, beta);
}

}  // namespace rfx
