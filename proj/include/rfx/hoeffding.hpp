#pragma once

// Reward-free exploration with maximum-uncertainty exploration rewards and a
// final projection of the value-targeted ridge estimate onto valid models.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rfx/core.hpp"
#include "rfx/model.hpp"
#include "rfx/projection.hpp"
#include "rfx/regression.hpp"

namespace rfx {

enum class UncertaintyMode { Relaxed, Exact };
enum class TieBreak { Lowest, Untruncated, Identifiable };
enum class Explorer { Optimistic, Uniform };

inline const char* to_string(UncertaintyMode m) { return m == UncertaintyMode::Relaxed ? "relaxed" : "exact"; }
inline const char* to_string(TieBreak t) {
    switch (t) {
        case TieBreak::Lowest: return "lowest";
        case TieBreak::Untruncated: return "untruncated";
        case TieBreak::Identifiable: return "identifiable";
    }
    return "?";
}
inline const char* to_string(Explorer e) { return e == Explorer::Optimistic ? "optimistic" : "uniform"; }

inline UncertaintyMode parse_uncertainty_mode(const std::string& s) {
    if (s == "relaxed") return UncertaintyMode::Relaxed;
    if (s == "exact") return UncertaintyMode::Exact;
    throw UsageError("unknown uncertainty mode: " + s);
}

inline TieBreak parse_tie_break(const std::string& s) {
    if (s == "lowest") return TieBreak::Lowest;
    if (s == "untruncated") return TieBreak::Untruncated;
    if (s == "identifiable") return TieBreak::Identifiable;
    throw UsageError("unknown tie break: " + s);
}

struct ExplorationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// H sqrt(d log(4 H^3 K / (lambda delta))) + sqrt(lambda) B
inline double beta_hoeffding(int d, int H, int K, double lambda, double delta, double B) {
    if (d < 1 || H < 1 || K < 1 || !(lambda > 0.0) || !(B > 0.0))
        throw UsageError("beta_hoeffding: arguments must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw UsageError("beta_hoeffding: delta must lie in (0,1)");
    const double arg = 4.0 * std::pow(double(H), 3) * K / (lambda * delta);
    if (!(arg > 1.0)) throw UsageError("beta_hoeffding: log argument must exceed 1");
    return H * std::sqrt(d * std::log(arg)) + std::sqrt(lambda) * B;
}

struct HoeffdingConfig {
    double delta = 0.1;
    double epsilon = 0.1;  // target accuracy; informational at desk scale
    int K = 64;
    double beta_scale = 1.0;
    UncertaintyMode mode = UncertaintyMode::Relaxed;
    Parameterization param = Parameterization::BasisSimplex;
    TieBreak tie_break = TieBreak::Untruncated;
    Explorer explorer = Explorer::Optimistic;
    ProjectionOptions projection;

    static double lambda_for(const MixtureInstance& inst) { return 1.0 / (inst.bound() * inst.bound()); }

    double beta_for(const MixtureInstance& inst) const {
        const double lam = lambda_for(inst);
        const double b = beta_scale *
                         beta_hoeffding(inst.d, inst.H, std::max(K, 1), lam, delta, inst.bound());
        if (b < std::sqrt(lam) * inst.bound() - 1e-12)
            throw UsageError("HoeffdingConfig: beta below sqrt(lambda) B");
        return b;
    }

    void validate() const {
        if (!(delta > 0.0 && delta < 1.0)) throw UsageError("HoeffdingConfig: delta must lie in (0,1)");
        if (K < 0) throw UsageError("HoeffdingConfig: K must be nonnegative");
        if (!(beta_scale > 0.0)) throw UsageError("HoeffdingConfig: beta_scale must be positive");
        if (tie_break == TieBreak::Identifiable)
            throw UsageError("HoeffdingConfig: tie break must be lowest or untruncated");
    }

    std::string digest() const {
        std::ostringstream os;
        os.precision(17);
        os << "hoeffding;" << delta << ';' << epsilon << ';' << K << ';' << beta_scale << ';'
           << to_string(mode) << ';' << to_string(param) << ';' << to_string(tie_break) << ';'
           << to_string(explorer);
        return hex64(fnv1a(os.str()));
    }
};

/// Symmetric square root of Lambda^{-1}.
inline Mat inverse_root(const CovarianceAccumulator& acc) {
    Eigen::SelfAdjointEigenSolver<Mat> es(acc.covariance());
    const Vec ev = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

struct Uncertainty {
    Vec V;               // maximizing value function, entries in {0, H}
    double score = 0.0;  // unscaled uncertainty (multiply by beta for the bonus)
};

/// Maximum-uncertainty value function at a pair with feature matrix F (d x S,
/// column s' = phi(s,a,s')) under covariance with inverse square root `root`.
///
/// Exact: max over V in {0,H}^S of ||root F V||_2 (box vertices of a convex
/// objective). Relaxed: max over ||f||_inf <= H of ||root F f||_1, which is
/// H max_g ||(root F)^T g||_1 over sign vectors g; the maximizing vertex f is
/// mapped into the value class as V = (f + H) / 2.
inline Uncertainty max_uncertainty(const Mat& F, const Mat& root, double H, UncertaintyMode mode) {
    const int d = static_cast<int>(F.rows());
    const int S = static_cast<int>(F.cols());
    const Mat M = root * F;
    Uncertainty out;
    out.V = Vec::Zero(S);
    if (mode == UncertaintyMode::Relaxed) {
        if (d > 14) throw UsageError("max_uncertainty: relaxed mode needs d <= 14");
        Vec best_t = Vec::Zero(S);
        double best = -1.0;
        // g and -g give the same objective, so fix g_0 = +1.
        const std::uint32_t n = 1u << (d - 1);
        Vec g(d);
        for (std::uint32_t mask = 0; mask < n; ++mask) {
            g[0] = 1.0;
            for (int i = 1; i < d; ++i) g[i] = (mask >> (i - 1)) & 1u ? -1.0 : 1.0;
            const Vec t = M.transpose() * g;
            const double v = t.lpNorm<1>();
            if (v > best) {
                best = v;
                best_t = t;
            }
        }
        out.score = H * best;
        for (int j = 0; j < S; ++j) out.V[j] = best_t[j] >= 0.0 ? H : 0.0;
        return out;
    }
    if (S > 14) throw UsageError("max_uncertainty: exact mode needs S <= 14");
    // Gray-code walk over {0,H}^S keeping y = M V current.
    Vec y = Vec::Zero(d);
    std::uint32_t code = 0, best_code = 0;
    double best = 0.0;
    const std::uint32_t n = 1u << S;
    for (std::uint32_t i = 1; i < n; ++i) {
        const int bit = std::countr_zero(i);
        code ^= 1u << bit;
        if (code & (1u << bit))
            y += H * M.col(bit);
        else
            y -= H * M.col(bit);
        const double v = y.squaredNorm();
        if (v > best) {
            best = v;
            best_code = code;
        }
    }
    out.score = std::sqrt(best);
    for (int j = 0; j < S; ++j) out.V[j] = (best_code >> j) & 1u ? H : 0.0;
    return out;
}

struct HoeffdingState {
    int H = 0, d = 0;
    std::vector<CovarianceAccumulator> acc;  // per step
    std::vector<Vec> theta_hat;
    std::vector<std::vector<Vec>> features;  // stored x_{t,h}
    std::vector<std::vector<double>> targets;
    int episodes = 0;

    HoeffdingState() = default;
    HoeffdingState(int horizon, int dim, double lambda)
        : H(horizon), d(dim), acc(horizon, CovarianceAccumulator(dim, lambda)),
          theta_hat(horizon, Vec::Zero(dim)), features(horizon), targets(horizon) {}
};

/// Output of one optimistic backward pass.
struct OptimisticPass {
    std::vector<Mat> Q;  // per step, S x A, clipped to [0, H]
    std::vector<Vec> V;  // H + 1 tables
    std::vector<Vec> W;  // untruncated optimistic values along the chosen actions
    Policy policy;
    Reward reward;  // exploration reward R_k = u_k
    std::vector<std::vector<Uncertainty>> maximizer;  // [h][s*A + a]
};

namespace detail {

inline bool prefer(double q, double w, double best_q, double best_w, TieBreak tb) {
    if (q != best_q) return q > best_q;
    return tb != TieBreak::Lowest && w > best_w;
}

}  // namespace detail

/// For h = H..1: u = beta * score, R = u, Q = min{theta_hat^T phi_{V_{h+1}} + R + u, H}
/// clipped at zero, V = max_a Q.
///
/// Ties in the clipped Q are common: with the worst-case beta, every Q equals
/// H for a long time. TieBreak::Untruncated ranks tied actions by the same
/// recursion without the clip, W_h = theta_hat^T phi_{W_{h+1}} + 2u, so the
/// rollout still heads for the largest accumulated uncertainty; remaining ties
/// go to the lowest index.
inline OptimisticPass optimistic_backward_pass(const MixtureInstance& inst, const HoeffdingState& st,
                                               double beta, UncertaintyMode mode,
                                               TieBreak tie_break) {
    const int S = inst.S, A = inst.A, H = inst.H;
    const double cap = static_cast<double>(H);
    OptimisticPass out;
    out.Q.assign(H, Mat::Zero(S, A));
    out.V.assign(H + 1, Vec::Zero(S));
    out.W.assign(H + 1, Vec::Zero(S));
    out.policy = Policy(H, S);
    out.reward = Reward(H, S, A);
    out.maximizer.assign(H, std::vector<Uncertainty>(static_cast<std::size_t>(S) * A));
    for (int h = H - 1; h >= 0; --h) {
        const Mat root = inverse_root(st.acc[h]);
        const Vec& th = st.theta_hat[h];
        for (int s = 0; s < S; ++s) {
            double best_q = -1.0, best_w = -std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int a = 0; a < A; ++a) {
                const Mat& F = inst.features(s, a);
                auto& mx = out.maximizer[h][static_cast<std::size_t>(s) * A + a];
                mx = max_uncertainty(F, root, cap, mode);
                const double u = beta * mx.score;
                out.reward(h, s, a) = u;
                const double cont = th.dot(F * out.V[h + 1]);
                const double q = std::clamp(cont + 2.0 * u, 0.0, cap);
                const double w = th.dot(F * out.W[h + 1]) + 2.0 * u;
                out.Q[h](s, a) = q;
                if (a == 0 || detail::prefer(q, w, best_q, best_w, tie_break)) {
                    best_q = q;
                    best_w = w;
                    arg = a;
                }
            }
            out.policy(h, s) = arg;
            out.V[h][s] = best_q;
            out.W[h][s] = best_w;
        }
    }
    return out;
}

/// Appends (phi_{V*}(s_h, a_h), V*(s_{h+1})) for every step, where V* is the
/// pair's maximizer from the episode's own pass, and refreshes theta_hat.
inline void record_episode(HoeffdingState& st, const MixtureInstance& inst, const Trajectory& traj,
                           const std::vector<std::vector<Uncertainty>>& maximizer) {
    if (traj.horizon() != st.H || static_cast<int>(maximizer.size()) != st.H)
        throw UsageError("record_episode: horizon mismatch");
    for (int h = 0; h < st.H; ++h) {
        const int s = traj.states[h], a = traj.actions[h], next = traj.states[h + 1];
        const std::size_t sa = static_cast<std::size_t>(s) * inst.A + a;
        if (sa >= maximizer[h].size() || maximizer[h][sa].V.size() != inst.S)
            throw UsageError("record_episode: missing cached maximizer");
        const Vec& Vstar = maximizer[h][sa].V;
        Vec x = inst.phi_V(s, a, Vstar);
        const double y = Vstar[next];
        st.acc[h].update(x, y);
        st.features[h].push_back(std::move(x));
        st.targets[h].push_back(y);
        st.theta_hat[h] = st.acc[h].ridge_solve();
    }
    ++st.episodes;
}

/// Lambda-metric projection of each theta_hat onto the valid models.
inline EstimatedModel project_to_valid_model(const MixtureInstance& inst,
                                             const std::vector<Vec>& theta_hat,
                                             const std::vector<CovarianceAccumulator>& acc,
                                             double beta, Parameterization param,
                                             const ProjectionOptions& opt = {}) {
    if (static_cast<int>(theta_hat.size()) != inst.H || static_cast<int>(acc.size()) != inst.H)
        throw UsageError("project_to_valid_model: need one estimate per step");
    const ValiditySet vs = validity_set(inst, param);
    EstimatedModel m;
    m.beta = beta;
    for (int h = 0; h < inst.H; ++h) {
        const Mat& G = acc[h].covariance();
        const auto res = project_onto(theta_hat[h], G, vs, {}, opt);
        if (res.validity_violation > kModelTol)
            throw ExplorationError("project_to_valid_model: projection failed at step " +
                                   std::to_string(h));
        if (!res.converged) m.add_flag("projection-iteration-cap");
        const Vec diff = res.x - theta_hat[h];
        m.slack.push_back(std::sqrt(std::max(0.0, diff.dot(G * diff))));
        m.theta.push_back(res.x);
        if (m.slack.back() > beta) m.add_flag("slack-exceeds-beta");
    }
    const auto rep = validate_model(inst, m.theta);
    if (!rep.pass)
        throw ExplorationError("project_to_valid_model: projected model is invalid (residual " +
                               std::to_string(rep.max_residual()) + ")");
    return m;
}

struct EpisodeDiagnostics {
    int k = 0;
    double root_value = 0.0;        // E_nu V_{k,1}
    double root_untruncated = 0.0;  // E_nu W_{k,1}
    double mean_bonus = 0.0;
    double max_bonus = 0.0;
};

struct HoeffdingRun {
    EstimatedModel model;
    HoeffdingState state;
    std::vector<EpisodeDiagnostics> episodes;
};

/// Called after each episode has been recorded. `pass` is empty (no tables)
/// for the uniform explorer.
using HoeffdingObserver =
    std::function<void(int k, const OptimisticPass& pass, const HoeffdingState& st, const Trajectory& traj)>;

/// Runs cfg.K episodes, then projects. Explorer::Uniform replaces the greedy
/// rollout with uniformly random actions and keeps the same regression targets.
inline HoeffdingRun run_hoeffding(const HoeffdingConfig& cfg, const MixtureInstance& inst, Rng& rng,
                                  const HoeffdingObserver& observer = {}) {
    cfg.validate();
    const double lambda = HoeffdingConfig::lambda_for(inst);
    const double beta = cfg.beta_for(inst);
    HoeffdingRun run;
    run.state = HoeffdingState(inst.H, inst.d, lambda);
    const TabularModel& truth = inst.true_model();
    for (int k = 0; k < cfg.K; ++k) {
        OptimisticPass pass;
        Trajectory traj;
        EpisodeDiagnostics diag;
        diag.k = k;
        if (cfg.explorer == Explorer::Optimistic) {
            pass = optimistic_backward_pass(inst, run.state, beta, cfg.mode, cfg.tie_break);
            traj = sample_episode(truth, pass.policy, rng, k);
            diag.root_value = inst.init.dot(pass.V[0]);
            diag.root_untruncated = inst.init.dot(pass.W[0]);
            double sum = 0.0;
            for (double u : pass.reward.r) {
                sum += u;
                diag.max_bonus = std::max(diag.max_bonus, u);
            }
            diag.mean_bonus = sum / std::max<std::size_t>(1, pass.reward.r.size());
            record_episode(run.state, inst, traj, pass.maximizer);
        } else {
            Policy pi(inst.H, inst.S);
            for (auto& a : pi.act) a = uniform_int(rng, inst.A);
            traj = sample_episode(truth, pi, rng, k);
            std::vector<std::vector<Uncertainty>> mx(inst.H);
            for (int h = 0; h < inst.H; ++h) {
                mx[h].resize(static_cast<std::size_t>(inst.S) * inst.A);
                const int s = traj.states[h], a = traj.actions[h];
                const auto root = inverse_root(run.state.acc[h]);
                mx[h][static_cast<std::size_t>(s) * inst.A + a] =
                    max_uncertainty(inst.features(s, a), root, inst.H, cfg.mode);
            }
            record_episode(run.state, inst, traj, mx);
        }
        run.episodes.push_back(diag);
        if (observer) observer(k, pass, run.state, traj);
    }
    run.model = project_to_valid_model(inst, run.state.theta_hat, run.state.acc, beta, cfg.param,
                                       cfg.projection);
    run.model.algorithm = cfg.explorer == Explorer::Optimistic ? "hoeffding" : "uniform-baseline";
    run.model.K = cfg.K;
    run.model.config_digest = cfg.digest();
    if (cfg.beta_scale != 1.0) run.model.add_flag("beta-scaled");
    return run;
}

}  // namespace rfx
