#pragma once

// Variance-aware reward-free exploration: five weighted ridge estimators per
// step, an append-only ellipsoidal confidence set, and an approximate joint
// maximization over (policy, model, reward) of the optimistic uncertainty
// value.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "rfx/core.hpp"
#include "rfx/hoeffding.hpp"
#include "rfx/model.hpp"
#include "rfx/projection.hpp"
#include "rfx/regression.hpp"

namespace rfx {

struct BernsteinBetas {
    double hat = 0.0, check = 0.0, tilde = 0.0;
};

/// beta_hat   = 16 sqrt(d log(1 + K H^2/(d lambda)) log(32 K^2 H/delta)) + sqrt(lambda) B
/// beta_check = 16 d sqrt(log(1 + K H^2/(d lambda)) log(32 K^2 H/delta)) + sqrt(lambda) B
/// beta_tilde = 16 H^2 sqrt(d log(1 + K H^4/(d lambda)) log(32 K^2 H/delta)) + sqrt(lambda) B
inline BernsteinBetas bernstein_betas(int d, int H, int K, double lambda, double delta, double B) {
    if (d < 1 || H < 1 || K < 1 || !(lambda > 0.0) || !(B > 0.0))
        throw UsageError("bernstein_betas: arguments must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw UsageError("bernstein_betas: delta must lie in (0,1)");
    const double dd = d, HH = H, KK = K;
    const double l1 = std::log(1.0 + KK * HH * HH / (dd * lambda));
    const double l3 = std::log(1.0 + KK * std::pow(HH, 4) / (dd * lambda));
    const double l2 = std::log(32.0 * KK * KK * HH / delta);
    if (!(l2 > 0.0)) throw UsageError("bernstein_betas: log argument must exceed 1");
    const double add = std::sqrt(lambda) * B;
    return {16.0 * std::sqrt(dd * l1 * l2) + add, 16.0 * dd * std::sqrt(l1 * l2) + add,
            16.0 * HH * HH * std::sqrt(dd * l3 * l2) + add};
}

struct SolverBudget {
    int restarts = 1;        // extra random starts after the central one
    int iterations = 4;      // block-coordinate rounds per start
    int ascent_steps = 6;    // backtracking halvings per model step
    double fd_step = 1e-5;   // finite-difference step for the model gradient
    double tolerance = 1e-9; // minimum accepted improvement
};

struct BernsteinConfig {
    double delta = 0.1;
    double epsilon = 0.1;
    int K = 64;
    double beta_scale = 1.0;
    Parameterization param = Parameterization::BasisSimplex;
    TieBreak tie_break = TieBreak::Identifiable;
    SolverBudget budget;
    ProjectionOptions projection;

    static double lambda_for(const MixtureInstance& inst) { return 1.0 / (inst.bound() * inst.bound()); }

    BernsteinBetas betas_for(const MixtureInstance& inst) const {
        auto b = bernstein_betas(inst.d, inst.H, std::max(K, 1), lambda_for(inst), delta, inst.bound());
        b.hat *= beta_scale;
        b.check *= beta_scale;
        b.tilde *= beta_scale;
        return b;
    }

    void validate() const {
        if (!(delta > 0.0 && delta < 1.0)) throw UsageError("BernsteinConfig: delta must lie in (0,1)");
        if (K < 0) throw UsageError("BernsteinConfig: K must be nonnegative");
        if (!(beta_scale > 0.0)) throw UsageError("BernsteinConfig: beta_scale must be positive");
        if (budget.restarts < 0 || budget.iterations < 1 || budget.ascent_steps < 0)
            throw UsageError("BernsteinConfig: bad solver budget");
    }

    std::string digest() const {
        std::ostringstream os;
        os.precision(17);
        os << "bernstein;" << delta << ';' << epsilon << ';' << K << ';' << beta_scale << ';'
           << to_string(param) << ';' << to_string(tie_break) << ';' << budget.restarts << ';'
           << budget.iterations << ';' << budget.ascent_steps << ';' << budget.fd_step;
        return hex64(fnv1a(os.str()));
    }
};

// ---------------------------------------------------------------------------
// Estimators

/// Estimator i (0-based here) regresses on:
///   0: phi_{Vhat}, target Vhat(s'), weight 1/sigma1^2
///   1: phi_{V},    target V(s'),    weight 1/sigma2^2
///   2: phi_{Vhat^2}, target Vhat(s')^2
///   3: phi_{V^2},    target V(s')^2
///   4: phi_{Ytilde}, target Ytilde(s')
struct EstimatorBank {
    static constexpr int kCount = 5;

    struct Record {
        std::array<Vec, kCount> x;
        std::array<double, kCount> y{};
        std::array<double, kCount> w{};
    };

    int H = 0, d = 0;
    std::vector<std::array<CovarianceAccumulator, kCount>> acc;  // [h][i]
    std::vector<std::array<Vec, kCount>> theta;                   // [h][i]
    std::vector<std::vector<Record>> records;                     // [h][episode]
    int episodes = 0;

    EstimatorBank() = default;
    EstimatorBank(int horizon, int dim, double lambda) : H(horizon), d(dim), records(horizon) {
        acc.resize(horizon);
        theta.resize(horizon);
        for (int h = 0; h < horizon; ++h)
            for (int i = 0; i < kCount; ++i) {
                acc[h][i] = CovarianceAccumulator(dim, lambda);
                theta[h][i] = Vec::Zero(dim);
            }
    }
};

// ---------------------------------------------------------------------------
// Confidence set

/// Per-step validity constraints plus append-only ellipsoids. Membership is
/// evaluated for all ellipsoids of a step at once through the expansion
///   ||x - c||_M^2 = vech-weights(M) . vech(x x^T) - 2 (M c) . x + c^T M c,
/// stored as one row per ellipsoid.
class ConfidenceSet {
public:
    ConfidenceSet() = default;
    ConfidenceSet(const MixtureInstance& inst, Parameterization param)
        : H_(inst.H), d_(inst.d), lifted_dim_(d_ * (d_ + 1) / 2 + d_ + 1),
          validity_(validity_set(inst, param)), steps_(inst.H) {}

    const ValiditySet& validity() const { return validity_; }
    int horizon() const { return H_; }
    int size(int h) const { return static_cast<int>(steps_.at(h).list.size()); }
    const Ellipsoid& ellipsoid(int h, int i) const { return steps_.at(h).list.at(i); }

    void add(int h, Vec center, std::shared_ptr<const Mat> M, double radius) {
        auto& st = steps_.at(h);
        Ellipsoid e(std::move(center), std::move(M), radius);
        const Mat& m = *e.M;
        for (int i = 0; i < d_; ++i)
            for (int j = i; j < d_; ++j) st.rows.push_back(i == j ? m(i, i) : m(i, j) + m(j, i));
        for (int i = 0; i < d_; ++i) st.rows.push_back(-2.0 * e.Mc[i]);
        st.rows.push_back(e.cMc);
        st.list.push_back(std::move(e));
    }

    /// Squared distances ||x - c_i||^2_{M_i} for every ellipsoid at step h.
    Vec squared_distances(int h, const Vec& x) const {
        const auto& st = steps_.at(h);
        const int n = static_cast<int>(st.list.size());
        if (n == 0) return Vec();
        Vec z(lifted_dim_);
        int k = 0;
        for (int i = 0; i < d_; ++i)
            for (int j = i; j < d_; ++j) z[k++] = x[i] * x[j];
        for (int i = 0; i < d_; ++i) z[k++] = x[i];
        z[k] = 1.0;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> R(
            st.rows.data(), n, lifted_dim_);
        return R * z;
    }

    /// Fills `out` with ellipsoids violated by more than tol; returns the
    /// largest distance - radius and its index.
    std::pair<double, int> violations(int h, const Vec& x, double tol, std::vector<int>& out) const {
        out.clear();
        const auto& st = steps_.at(h);
        if (st.list.empty()) return {-std::numeric_limits<double>::infinity(), -1};
        const Vec q = squared_distances(h, x);
        double worst = -std::numeric_limits<double>::infinity();
        int worst_i = -1;
        for (int i = 0; i < q.size(); ++i) {
            const double v = std::sqrt(std::max(0.0, q[i])) - st.list[i].radius;
            if (v > worst) {
                worst = v;
                worst_i = i;
            }
            if (v > tol) out.push_back(i);
        }
        return {worst, worst_i};
    }

    /// (largest distance - radius, index of the violated ellipsoid or -1).
    std::pair<double, int> membership(int h, const Vec& x, double tol = 1e-8) const {
        std::vector<int> tmp;
        auto [worst, idx] = violations(h, x, tol, tmp);
        if (idx >= 0 && worst <= tol) idx = -1;
        return {worst, idx};
    }

    bool contains(int h, const Vec& x, double tol = 1e-8) const {
        return validity_.violation(x) <= tol && membership(h, x, tol).second < 0;
    }

    ProjectionResult project(int h, const Vec& x0, const Mat& G, const ProjectionOptions& opt = {}) const {
        auto find = [&](const Vec& x, double tol, std::vector<int>& out) {
            return violations(h, x, tol, out);
        };
        auto get = [&](int i) -> const Ellipsoid& { return steps_[h].list[i]; };
        return detail::project_active(x0, G, validity_, size(h) > 0, find, get, opt);
    }

private:
    struct Step {
        std::vector<Ellipsoid> list;
        std::vector<double> rows;  // row-major, lifted_dim_ per ellipsoid
    };
    int H_ = 0, d_ = 0, lifted_dim_ = 0;
    ValiditySet validity_;
    std::vector<Step> steps_;
};

/// Appends five snapshotted ellipsoids per step with radii
/// (beta_hat, beta_hat, beta_tilde, beta_tilde, beta_tilde).
inline void add_constraints(ConfidenceSet& set, const EstimatorBank& bank, const BernsteinBetas& b) {
    const std::array<double, EstimatorBank::kCount> radius{b.hat, b.hat, b.tilde, b.tilde, b.tilde};
    for (int h = 0; h < bank.H; ++h)
        for (int i = 0; i < EstimatorBank::kCount; ++i)
            set.add(h, bank.theta[h][i], std::make_shared<const Mat>(bank.acc[h][i].covariance()),
                    radius[i]);
}

// ---------------------------------------------------------------------------
// Value recursions

/// Values of pi under the model theta (scaled view) and reward R.
inline std::vector<Vec> value_hat(const MixtureInstance& inst, const std::vector<Vec>& theta,
                                  const Reward& R, const Policy& pi) {
    if (!validate_model(inst, theta).pass) throw UsageError("value_hat: invalid model");
    return evaluate_policy(inst.model_from(theta), R, pi).V;
}

/// (u1, u2) = beta_hat (||phi_{Vhat_next}||_{Lambda1^{-1}}, ||phi_{V_next}||_{Lambda2^{-1}}).
inline std::pair<double, double> uncertainty_bonuses(const MixtureInstance& inst, const EstimatorBank& bank,
                                                     double beta_hat, int h, int s, int a,
                                                     const Vec& Vhat_next, const Vec& V_next) {
    const Mat& F = inst.features(s, a);
    return {beta_hat * bank.acc[h][0].elliptical_norm(F * Vhat_next),
            beta_hat * bank.acc[h][1].elliptical_norm(F * V_next)};
}

struct ValueTables {
    std::vector<Vec> Vhat;  // value of pi under the model and R
    std::vector<Vec> V;     // optimistic uncertainty value, clipped to [0, H]
    std::vector<Vec> W;     // same recursion without the clip
    double objective = 0.0;
    double untruncated = 0.0;
};

namespace detail {

/// x^T M x - (1^T M x)^2 / (1^T M 1), given x^T M x: the squared norm of x
/// modulo the all-ones direction. Two valid models differ by a vector summing to
/// zero, so only this part of a feature is ever uncertain.
inline double quotient_norm_sq(double x_M_x, const Vec& x, const Vec& M1, double oneM1) {
    const double c = M1.dot(x);
    return std::max(0.0, x_M_x - c * c / oneM1);
}

/// Shared evaluator for the optimistic recursion. With `greedy` the policy
/// is rebuilt step by step (lexicographic on clipped then unclipped value,
/// then lowest index); otherwise `pi` is followed.
///
/// W is the unclipped recursion used as the secondary key. Under
/// TieBreak::Identifiable its bonuses use quotient_norm_sq, so a candidate
/// whose uncertainty lies only along the all-ones direction (e.g. a constant
/// value function) does not outrank one that probes directions the data can
/// still resolve. The clipped objective always uses the plain norms.
inline ValueTables bernstein_recursion(const MixtureInstance& inst, const EstimatorBank& bank,
                                       double beta_hat, const TabularModel& model, const Reward& R,
                                       Policy& pi, bool greedy, TieBreak tie_break) {
    const int S = inst.S, A = inst.A, H = inst.H;
    const double cap = H;
    const bool quotient = tie_break == TieBreak::Identifiable;
    ValueTables t;
    t.Vhat.assign(H + 1, Vec::Zero(S));
    t.V.assign(H + 1, Vec::Zero(S));
    t.W.assign(H + 1, Vec::Zero(S));
    const Vec ones = Vec::Ones(inst.d);
    Vec f1(inst.d), f2(inst.d), g(inst.d);
    for (int h = H - 1; h >= 0; --h) {
        const Mat& L1 = bank.acc[h][0].inverse();
        const Mat& L2 = bank.acc[h][1].inverse();
        const Vec m1 = L1 * ones, m2 = L2 * ones;
        const double s1 = ones.dot(m1), s2 = ones.dot(m2);
        for (int s = 0; s < S; ++s) {
            const int lo = greedy ? 0 : pi(h, s);
            const int hi = greedy ? A : pi(h, s) + 1;
            double best_q = -1.0, best_w = -std::numeric_limits<double>::infinity(), best_vh = 0.0;
            int arg = lo;
            for (int a = lo; a < hi; ++a) {
                const Mat& F = inst.features(s, a);
                f1.noalias() = F * t.Vhat[h + 1];
                f2.noalias() = F * t.V[h + 1];
                g.noalias() = L1 * f1;
                const double n1 = f1.dot(g);
                g.noalias() = L2 * f2;
                const double n2 = f2.dot(g);
                const double u = beta_hat * (std::sqrt(std::max(0.0, n1)) + std::sqrt(std::max(0.0, n2)));
                const double uw =
                    quotient ? beta_hat * (std::sqrt(quotient_norm_sq(n1, f1, m1, s1)) +
                                           std::sqrt(quotient_norm_sq(n2, f2, m2, s2)))
                             : u;
                const auto row = model.row(h, s, a);
                const double q = std::clamp(u + row.dot(t.V[h + 1]), 0.0, cap);
                const double w = uw + row.dot(t.W[h + 1]);
                const double vh = R(h, s, a) + row.dot(t.Vhat[h + 1]);
                if (a == lo || prefer(q, w, best_q, best_w, tie_break)) {
                    best_q = q;
                    best_w = w;
                    best_vh = vh;
                    arg = a;
                }
            }
            if (greedy) pi(h, s) = arg;
            t.V[h][s] = best_q;
            t.W[h][s] = best_w;
            t.Vhat[h][s] = best_vh;
        }
    }
    t.objective = inst.init.dot(t.V[0]);
    t.untruncated = inst.init.dot(t.W[0]);
    return t;
}

}  // namespace detail

/// V_h(s) = min{u1 + u2 + P~ V_{h+1}, H} at (s, pi_h(s)), with u1 consuming
/// Vhat_{h+1} and u2 consuming V_{h+1}.
inline ValueTables optimistic_value(const MixtureInstance& inst, const EstimatorBank& bank,
                                    const BernsteinBetas& b, const std::vector<Vec>& theta,
                                    const Reward& R, const Policy& pi) {
    Policy p = pi;
    return detail::bernstein_recursion(inst, bank, b.hat, inst.model_from(theta), R, p, false,
                                       TieBreak::Lowest);
}

/// Uncertainty value under the true transitions: min{u1 + P V~_{h+1}, H}. Test diagnostic.
inline std::vector<Vec> diagnostic_tilde_value(const MixtureInstance& inst, const EstimatorBank& bank,
                                               const BernsteinBetas& b, const std::vector<Vec>& theta,
                                               const Reward& R, const Policy& pi) {
    const auto Vhat = value_hat(inst, theta, R, pi);
    const TabularModel& P = inst.true_model();
    std::vector<Vec> Vt(inst.H + 1, Vec::Zero(inst.S));
    for (int h = inst.H - 1; h >= 0; --h)
        for (int s = 0; s < inst.S; ++s) {
            const int a = pi(h, s);
            const double u1 = b.hat * bank.acc[h][0].elliptical_norm(inst.phi_V(s, a, Vhat[h + 1]));
            Vt[h][s] = std::min(u1 + P.expect(h, s, a, Vt[h + 1]), double(inst.H));
        }
    return Vt;
}

/// theta^T phi_{V^2}(s,a) - (theta^T phi_V(s,a))^2 for all pairs, S x A, unclamped.
inline Mat variance_table(const MixtureInstance& inst, const Vec& theta_h, const Vec& V_next) {
    Mat out(inst.S, inst.A);
    const Vec V2 = V_next.array().square().matrix();
    for (int s = 0; s < inst.S; ++s)
        for (int a = 0; a < inst.A; ++a) {
            const Mat& F = inst.features(s, a);
            const double m = theta_h.dot(F * V_next);
            out(s, a) = theta_h.dot(F * V2) - m * m;
        }
    return out;
}

struct VarianceTerms {
    double var1 = 0.0, var2 = 0.0;  // clamped to [0, H^2]
    double E1 = 0.0, E2 = 0.0;
    double sigma1_sq = 0.0, sigma2_sq = 0.0;
    double clamp = 0.0;  // largest amount removed by the clamp
};

inline VarianceTerms variance_and_sigma(const MixtureInstance& inst, const EstimatorBank& bank,
                                        const BernsteinBetas& b, const Vec& theta_h, int h, int s,
                                        int a, const Vec& Vhat_next, const Vec& V_next) {
    const double H2 = double(inst.H) * inst.H;
    const Mat& F = inst.features(s, a);
    const Vec vh2 = Vhat_next.array().square().matrix();
    const Vec v2 = V_next.array().square().matrix();
    const Vec f1 = F * Vhat_next, f2 = F * V_next, f3 = F * vh2, f4 = F * v2;
    VarianceTerms t;
    const double raw1 = theta_h.dot(f3) - std::pow(theta_h.dot(f1), 2);
    const double raw2 = theta_h.dot(f4) - std::pow(theta_h.dot(f2), 2);
    t.var1 = std::clamp(raw1, 0.0, H2);
    t.var2 = std::clamp(raw2, 0.0, H2);
    t.clamp = std::max(std::abs(raw1 - t.var1), std::abs(raw2 - t.var2));
    t.E1 = std::min(H2, 4.0 * inst.H * b.check * bank.acc[h][0].elliptical_norm(f1)) +
           std::min(H2, 2.0 * b.tilde * bank.acc[h][2].elliptical_norm(f3));
    t.E2 = std::min(H2, 4.0 * inst.H * b.check * bank.acc[h][1].elliptical_norm(f2)) +
           std::min(H2, 2.0 * b.tilde * bank.acc[h][3].elliptical_norm(f4));
    t.sigma1_sq = std::max(H2 / inst.d, t.var1 + t.E1);
    t.sigma2_sq = std::max(H2 / inst.d, t.var2 + t.E2);
    return t;
}

/// Y~_{H+1} = 0, Y~_h(s) = var1_h(s, pi(s)) + P~_h Y~_{h+1}(s, pi(s)), where
/// var1[h] is the S x A table of clamped variances of Vhat_{h+1}.
inline std::vector<Vec> y_tilde(const MixtureInstance& inst, const std::vector<Vec>& theta,
                                const Policy& pi, const std::vector<Mat>& var1) {
    const TabularModel m = inst.model_from(theta);
    std::vector<Vec> Y(inst.H + 1, Vec::Zero(inst.S));
    for (int h = inst.H - 1; h >= 0; --h)
        for (int s = 0; s < inst.S; ++s) {
            const int a = pi(h, s);
            Y[h][s] = var1[h](s, a) + m.expect(h, s, a, Y[h + 1]);
        }
    return Y;
}

/// One record per step from episode `traj` and the episode's tables.
inline void update_bank(EstimatorBank& bank, const MixtureInstance& inst, const Trajectory& traj,
                        const std::vector<Vec>& Vhat, const std::vector<Vec>& V,
                        const std::vector<Vec>& Y, const std::vector<VarianceTerms>& sig) {
    if (traj.horizon() != bank.H || static_cast<int>(Vhat.size()) != bank.H + 1 ||
        static_cast<int>(V.size()) != bank.H + 1 || static_cast<int>(Y.size()) != bank.H + 1 ||
        static_cast<int>(sig.size()) != bank.H)
        throw UsageError("update_bank: shape mismatch");
    for (int h = 0; h < bank.H; ++h) {
        const int s = traj.states[h], a = traj.actions[h], n = traj.states[h + 1];
        const Mat& F = inst.features(s, a);
        const Vec vh2 = Vhat[h + 1].array().square().matrix();
        const Vec v2 = V[h + 1].array().square().matrix();
        EstimatorBank::Record r;
        r.x = {F * Vhat[h + 1], F * V[h + 1], F * vh2, F * v2, F * Y[h + 1]};
        r.y = {Vhat[h + 1][n], V[h + 1][n], vh2[n], v2[n], Y[h + 1][n]};
        r.w = {1.0 / sig[h].sigma1_sq, 1.0 / sig[h].sigma2_sq, 1.0, 1.0, 1.0};
        for (int i = 0; i < EstimatorBank::kCount; ++i) {
            bank.acc[h][i].update(r.x[i], r.y[i], r.w[i]);
            bank.theta[h][i] = bank.acc[h][i].ridge_solve();
        }
        bank.records[h].push_back(std::move(r));
    }
    ++bank.episodes;
}

// ---------------------------------------------------------------------------
// Joint maximization

struct SolverTrace {
    int restarts = 0;
    int rounds = 0;
    int accepted = 0;
    double baseline = 0.0;  // R = 1, central model, greedy policy
    double improvement = 0.0;
    bool saturated = false;
    bool fallback = false;
    std::vector<double> center_distance;  // ||theta~ - theta_hat_1||_{Lambda_1} per step
};

struct OptimisticSolution {
    Policy policy;
    std::vector<Vec> theta;
    Reward reward;
    int reward_index = 0;  // 0 = all ones, 1 + (h*S + s)*A + a = indicator
    ValueTables tables;
    double objective = 0.0;
    SolverTrace trace;
};

/// Dictionary entry j: 0 is the all-ones reward, otherwise an indicator.
inline Reward dictionary_reward(int H, int S, int A, int j) {
    if (j == 0) return Reward(H, S, A, 1.0);
    Reward R(H, S, A, 0.0);
    R.r.at(static_cast<std::size_t>(j - 1)) = 1.0;
    return R;
}

namespace detail {

struct Candidate {
    std::vector<Vec> theta;
    Reward reward;
    int reward_index = 0;
    Policy policy;
    ValueTables tables;
};

inline bool better_key(const ValueTables& a, const ValueTables& b, double tol, TieBreak tb) {
    if (a.objective > b.objective + tol) return true;
    if (a.objective < b.objective - tol) return false;
    return tb != TieBreak::Lowest && a.untruncated > b.untruncated + tol;
}

}  // namespace detail

/// Block-coordinate ascent on V_1(s1) over (policy, model, reward):
///   policy: greedy backward induction on the optimistic recursion;
///   reward: best entry of {all ones} U {indicators}, each scored with its own
///           greedy policy (scoring against the incumbent policy alone
///           cannot see rewards whose uncertainty lies off that policy's path);
///   model:  finite-difference ascent in the Lambda_2 metric, each trial point
///           projected onto validity and the confidence ellipsoids.
/// The first start uses the estimator-1 center projected in the Lambda_1
/// metric. Policy and reward moves compare the clipped objective and then the
/// unclipped one; model moves and restarts must raise the clipped objective,
/// so when it sits at H the central model is kept.
inline OptimisticSolution solve_optimistic_argmax(const MixtureInstance& inst, const ConfidenceSet& set,
                                                  const EstimatorBank& bank, const BernsteinBetas& b,
                                                  const SolverBudget& budget, TieBreak tie_break,
                                                  Rng& rng, const ProjectionOptions& popt = {}) {
    const int H = inst.H, S = inst.S, A = inst.A;
    const double cap = H;
    OptimisticSolution out;
    SolverTrace& tr = out.trace;

    // Central start.
    std::vector<Vec> center(H);
    for (int h = 0; h < H; ++h) {
        const auto res = set.project(h, bank.theta[h][0], bank.acc[h][0].covariance(), popt);
        if (res.validity_violation > kModelTol || res.ellipsoid_violation > popt.ellipsoid_tolerance) {
            const auto fb = project_onto(bank.theta[h][0], bank.acc[h][0].covariance(), set.validity(),
                                         {}, popt);
            center[h] = fb.x;
            tr.fallback = true;
        } else {
            center[h] = res.x;
        }
    }

    auto evaluate = [&](detail::Candidate& c, bool greedy) {
        c.tables = detail::bernstein_recursion(inst, bank, b.hat, inst.model_from(c.theta), c.reward,
                                               c.policy, greedy, tie_break);
    };

    auto reward_step = [&](detail::Candidate& c) {
        bool moved = false;
        const int n = 1 + H * S * A;
        const TabularModel model = inst.model_from(c.theta);
        Policy pi(H, S);
        for (int j = 0; j < n; ++j) {
            if (j == c.reward_index) continue;
            Reward R = dictionary_reward(H, S, A, j);
            ValueTables tables = detail::bernstein_recursion(inst, bank, b.hat, model, R, pi, true, tie_break);
            if (detail::better_key(tables, c.tables, budget.tolerance, tie_break)) {
                c.reward = std::move(R);
                c.reward_index = j;
                c.policy = pi;
                c.tables = std::move(tables);
                moved = true;
            }
        }
        return moved;
    };

    auto policy_step = [&](detail::Candidate& c) {
        detail::Candidate t = c;
        evaluate(t, true);
        if (!detail::better_key(t.tables, c.tables, budget.tolerance, tie_break)) return false;
        c = std::move(t);
        return true;
    };

    auto feasible_point = [&](int h, const Vec& x, const Mat& G) {
        const auto res = set.project(h, x, G, popt);
        const bool ok = res.validity_violation <= kModelTol &&
                        res.ellipsoid_violation <= popt.ellipsoid_tolerance;
        return std::pair{res.x, ok};
    };

    auto model_step = [&](detail::Candidate& c) {
        if (c.tables.objective >= cap - budget.tolerance) return false;
        // Gradient of the clipped objective, restricted to the sum hyperplane.
        std::vector<Vec> grad(H, Vec::Zero(inst.d));
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < inst.d; ++i) {
                detail::Candidate t = c;
                t.theta[h][i] += budget.fd_step;
                t.tables = detail::bernstein_recursion(inst, bank, b.hat, inst.model_from(t.theta),
                                                       t.reward, t.policy, false, tie_break);
                grad[h][i] = (t.tables.objective - c.tables.objective) / budget.fd_step;
            }
        double norm = 0.0;
        for (int h = 0; h < H; ++h) {
            grad[h].array() -= grad[h].mean();
            grad[h] = bank.acc[h][1].inverse() * grad[h];
            grad[h] -= set.validity().eq * (set.validity().eq.dot(grad[h]) / set.validity().eq.squaredNorm());
            norm = std::max(norm, grad[h].norm());
        }
        if (!(norm > 0.0)) return false;
        double eta = 1.0 / norm;
        for (int step = 0; step <= budget.ascent_steps; ++step, eta *= 0.5) {
            detail::Candidate t = c;
            bool ok = true;
            for (int h = 0; h < H && ok; ++h) {
                auto [x, good] = feasible_point(h, c.theta[h] + eta * grad[h], bank.acc[h][1].covariance());
                t.theta[h] = x;
                ok = good;
            }
            if (!ok) continue;
            evaluate(t, false);
            if (t.tables.objective > c.tables.objective + budget.tolerance) {
                c = std::move(t);
                return true;
            }
        }
        return false;
    };

    auto climb = [&](detail::Candidate& c) {
        for (int round = 0; round < budget.iterations; ++round) {
            ++tr.rounds;
            bool moved = false;
            if (reward_step(c)) { moved = true; ++tr.accepted; }
            if (policy_step(c)) { moved = true; ++tr.accepted; }
            if (model_step(c)) { moved = true; ++tr.accepted; }
            if (!moved) break;
        }
    };

    detail::Candidate best;
    best.theta = center;
    best.reward = dictionary_reward(H, S, A, 0);
    best.reward_index = 0;
    best.policy = Policy(H, S);
    evaluate(best, true);
    tr.baseline = best.tables.objective;
    climb(best);

    tr.saturated = best.tables.objective >= cap - budget.tolerance;
    if (!tr.saturated) {
        for (int r = 0; r < budget.restarts; ++r) {
            ++tr.restarts;
            detail::Candidate c;
            c.theta.resize(H);
            bool ok = true;
            for (int h = 0; h < H && ok; ++h) {
                Vec x(inst.d);
                for (int i = 0; i < inst.d; ++i) x[i] = standard_exponential(rng);
                x *= inst.bound() / x.sum();
                auto [p, good] = feasible_point(h, x, bank.acc[h][1].covariance());
                c.theta[h] = p;
                ok = good;
            }
            if (!ok) continue;
            c.reward_index = uniform_int(rng, 1 + H * S * A);
            c.reward = dictionary_reward(H, S, A, c.reward_index);
            c.policy = Policy(H, S);
            evaluate(c, true);
            climb(c);
            if (c.tables.objective > best.tables.objective + budget.tolerance) best = std::move(c);
        }
    }

    out.policy = best.policy;
    out.theta = best.theta;
    out.reward = best.reward;
    out.reward_index = best.reward_index;
    out.tables = best.tables;
    out.objective = best.tables.objective;
    tr.improvement = out.objective - tr.baseline;
    tr.center_distance.resize(H);
    for (int h = 0; h < H; ++h) {
        const Vec diff = out.theta[h] - bank.theta[h][0];
        tr.center_distance[h] = std::sqrt(std::max(0.0, diff.dot(bank.acc[h][0].covariance() * diff)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full run

struct BernsteinEpisode {
    int k = 0;
    double objective = 0.0;
    double untruncated = 0.0;
    double baseline = 0.0;
    double min_slack = 0.0;  // min over steps and ellipsoids of radius - distance for theta~_k
    double sigma1_min = 0.0, sigma1_max = 0.0;
    double sigma2_min = 0.0, sigma2_max = 0.0;
    double max_clamp = 0.0;
    double y_tilde_max = 0.0;  // max_s Y~_{k,1}(s)
    int reward_index = 0;
    bool fallback = false;
    bool saturated = false;
};

struct BernsteinRun {
    EstimatedModel model;
    EstimatorBank bank;
    ConfidenceSet set;
    std::vector<BernsteinEpisode> episodes;
};

/// Everything the tests want to inspect about one episode. `set` and `bank`
/// are observed before the episode's update.
struct BernsteinStep {
    int k = 0;
    const OptimisticSolution* solution = nullptr;
    const Trajectory* trajectory = nullptr;
    const std::vector<VarianceTerms>* sigma = nullptr;
    const std::vector<Vec>* y_tilde = nullptr;
    const EstimatorBank* bank = nullptr;
    const ConfidenceSet* set = nullptr;
};

using BernsteinObserver = std::function<void(const BernsteinStep&)>;

inline BernsteinRun run_bernstein(const BernsteinConfig& cfg, const MixtureInstance& inst, Rng& rng,
                                  const BernsteinObserver& before_update = {},
                                  const BernsteinObserver& after_update = {}) {
    cfg.validate();
    const double lambda = BernsteinConfig::lambda_for(inst);
    const BernsteinBetas b = cfg.betas_for(inst);
    BernsteinRun run;
    run.bank = EstimatorBank(inst.H, inst.d, lambda);
    run.set = ConfidenceSet(inst, cfg.param);
    const TabularModel& truth = inst.true_model();
    OptimisticSolution last;
    bool have_last = false;

    for (int k = 0; k < cfg.K; ++k) {
        OptimisticSolution sol = solve_optimistic_argmax(inst, run.set, run.bank, b, cfg.budget,
                                                         cfg.tie_break, rng, cfg.projection);
        const Trajectory traj = sample_episode(truth, sol.policy, rng, k);

        std::vector<Mat> var1(inst.H);
        for (int h = 0; h < inst.H; ++h)
            var1[h] = variance_table(inst, sol.theta[h], sol.tables.Vhat[h + 1])
                          .cwiseMax(0.0)
                          .cwiseMin(double(inst.H) * inst.H);
        const auto Y = y_tilde(inst, sol.theta, sol.policy, var1);
        std::vector<VarianceTerms> sig(inst.H);
        for (int h = 0; h < inst.H; ++h)
            sig[h] = variance_and_sigma(inst, run.bank, b, sol.theta[h], h, traj.states[h],
                                        traj.actions[h], sol.tables.Vhat[h + 1], sol.tables.V[h + 1]);

        BernsteinEpisode ep;
        ep.k = k;
        ep.objective = sol.objective;
        ep.untruncated = sol.tables.untruncated;
        ep.baseline = sol.trace.baseline;
        ep.reward_index = sol.reward_index;
        ep.fallback = sol.trace.fallback;
        ep.saturated = sol.trace.saturated;
        ep.y_tilde_max = Y[0].maxCoeff();
        ep.min_slack = std::numeric_limits<double>::infinity();
        for (int h = 0; h < inst.H; ++h)
            if (run.set.size(h) > 0) ep.min_slack = std::min(ep.min_slack, -run.set.membership(h, sol.theta[h]).first);
        if (!std::isfinite(ep.min_slack)) ep.min_slack = 0.0;
        ep.sigma1_min = ep.sigma2_min = std::numeric_limits<double>::infinity();
        for (const auto& s : sig) {
            ep.sigma1_min = std::min(ep.sigma1_min, s.sigma1_sq);
            ep.sigma1_max = std::max(ep.sigma1_max, s.sigma1_sq);
            ep.sigma2_min = std::min(ep.sigma2_min, s.sigma2_sq);
            ep.sigma2_max = std::max(ep.sigma2_max, s.sigma2_sq);
            ep.max_clamp = std::max(ep.max_clamp, s.clamp);
        }

        BernsteinStep view{k, &sol, &traj, &sig, &Y, &run.bank, &run.set};
        if (before_update) before_update(view);
        update_bank(run.bank, inst, traj, sol.tables.Vhat, sol.tables.V, Y, sig);
        add_constraints(run.set, run.bank, b);
        if (after_update) after_update(view);
        run.episodes.push_back(ep);
        last = std::move(sol);
        have_last = true;
    }

    EstimatedModel& m = run.model;
    m.algorithm = "bernstein";
    m.K = cfg.K;
    m.config_digest = cfg.digest();
    m.beta = b.hat;
    if (have_last) {
        m.theta = last.theta;
        m.slack = last.trace.center_distance;
        if (last.trace.fallback) m.add_flag("solver-fallback");
    } else {
        // No episodes: the feasible point nearest the zero estimate.
        const ValiditySet& vs = run.set.validity();
        for (int h = 0; h < inst.H; ++h) {
            const auto res = project_onto(Vec::Zero(inst.d), run.bank.acc[h][0].covariance(), vs, {},
                                          cfg.projection);
            m.theta.push_back(res.x);
            m.slack.push_back(std::sqrt(res.x.dot(run.bank.acc[h][0].covariance() * res.x)));
        }
    }
    for (double s : m.slack)
        if (s > m.beta) m.add_flag("slack-exceeds-beta");
    if (cfg.beta_scale != 1.0) m.add_flag("beta-scaled");
    const auto rep = validate_model(inst, m.theta);
    if (!rep.pass)
        throw ExplorationError("run_bernstein: output model is invalid (residual " +
                               std::to_string(rep.max_residual()) + ")");
    return run;
}

}  // namespace rfx
