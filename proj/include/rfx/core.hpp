#pragma once

// Episodic finite MDPs, linear mixture instances and exact evaluation.
//
// Steps are zero-based in code: h = 0..H-1, with value tables carrying an
// extra terminal entry V[H] == 0. State-action pairs are flattened as
// s * A + a everywhere (kernel rows, feature caches, reward tables).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfx/rng.hpp"

namespace rfx {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kDistributionTol = 1e-9;
inline constexpr double kModelTol = 1e-8;

struct Reward {
    int H = 0, S = 0, A = 0;
    std::vector<double> r;

    Reward() = default;
    Reward(int horizon, int states, int actions, double fill = 0.0)
        : H(horizon), S(states), A(actions),
          r(static_cast<std::size_t>(horizon) * states * actions, fill) {}

    double& operator()(int h, int s, int a) { return r[index(h, s, a)]; }
    double operator()(int h, int s, int a) const { return r[index(h, s, a)]; }

    bool in_unit_interval() const {
        return std::all_of(r.begin(), r.end(), [](double x) { return x >= 0.0 && x <= 1.0; });
    }

private:
    std::size_t index(int h, int s, int a) const {
        return (static_cast<std::size_t>(h) * S + s) * A + a;
    }
};

struct Policy {
    int H = 0, S = 0;
    std::vector<int> act;

    Policy() = default;
    Policy(int horizon, int states, int fill = 0)
        : H(horizon), S(states), act(static_cast<std::size_t>(horizon) * states, fill) {}

    int& operator()(int h, int s) { return act[static_cast<std::size_t>(h) * S + s]; }
    int operator()(int h, int s) const { return act[static_cast<std::size_t>(h) * S + s]; }

    bool well_formed(int A) const {
        return act.size() == static_cast<std::size_t>(H) * S &&
               std::all_of(act.begin(), act.end(), [A](int a) { return a >= 0 && a < A; });
    }

    bool operator==(const Policy&) const = default;
};

struct Trajectory {
    std::vector<int> states;   // H + 1 entries
    std::vector<int> actions;  // H entries
    int episode = 0;
    std::uint64_t seed = 0;

    int horizon() const { return static_cast<int>(actions.size()); }
    bool operator==(const Trajectory&) const = default;
};

/// Step-indexed tabular kernel: P[h] has one row per (s, a) and one column per
/// next state.
struct TabularModel {
    int S = 0, A = 0, H = 0;
    std::vector<Mat> P;
    Vec init;

    double prob(int h, int s, int a, int next) const { return P[h](s * A + a, next); }
    auto row(int h, int s, int a) const { return P[h].row(s * A + a); }

    /// Expected next-step value E[V(s') | s, a] at step h.
    double expect(int h, int s, int a, const Vec& V) const { return row(h, s, a).dot(V); }
};

struct DistributionCheck {
    Vec p;
    bool valid = true;
    double min_entry = 0.0;
    double sum = 0.0;
};

struct ModelReport {
    double row_sum_residual = 0.0;
    double negativity_residual = 0.0;
    int worst_h = -1, worst_s = -1, worst_a = -1;
    bool pass = true;

    double max_residual() const { return std::max(row_sum_residual, negativity_residual); }
};

/// Linear mixture MDP with transitions P_h(s'|s,a) = theta_h^T phi(s,a,s').
///
/// phi(s,a,s') = c_phi * (P_1(s'|s,a), ..., P_d(s'|s,a)) with c_phi = 1/sqrt(d),
/// which keeps ||phi_V(s,a)||_2 <= 1 for V in [0,1]^S. `theta` is stored in
/// this scaled view, where a valid mixture satisfies sum(theta) = sqrt(d) and
/// ||theta||_2 <= B = sqrt(d). The raw view (theta * c_phi) lives on the
/// probability simplex when the mixture is convex.
class MixtureInstance {
public:
    int S = 0, A = 0, H = 0, d = 0;
    std::vector<Mat> basis;  // d kernels of shape (S*A) x S
    std::vector<Vec> theta;  // H scaled mixing vectors
    Vec init;
    double feature_scale = 1.0;
    std::string family;
    std::uint64_t seed = 0;

    MixtureInstance() = default;

    MixtureInstance(int states, int actions, int horizon, std::vector<Mat> kernels,
                    std::vector<Vec> thetas, Vec init_dist, std::string fam = "custom",
                    std::uint64_t sd = 0)
        : S(states), A(actions), H(horizon), d(static_cast<int>(kernels.size())),
          basis(std::move(kernels)), theta(std::move(thetas)), init(std::move(init_dist)),
          feature_scale(d > 0 ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0),
          family(std::move(fam)), seed(sd) {
        check_shapes();
        refresh();
    }

    /// Recomputes cached features and the true kernel after editing members.
    void refresh() {
        features_.assign(static_cast<std::size_t>(S) * A, Mat(d, S));
        for (int sa = 0; sa < S * A; ++sa)
            for (int i = 0; i < d; ++i)
                features_[sa].row(i) = basis[i].row(sa) * feature_scale;
        true_model_ = model_from(theta);
    }

    double bound() const { return std::sqrt(static_cast<double>(d)); }

    /// d x S matrix whose column s' is phi(s, a, s').
    const Mat& features(int s, int a) const {
        check_pair(s, a);
        return features_[static_cast<std::size_t>(s) * A + a];
    }

    Vec phi_V(int s, int a, const Vec& V) const {
        if (V.size() != S) throw UsageError("phi_V: value table has wrong length");
        return features(s, a) * V;
    }

    DistributionCheck transition(const Vec& th, int s, int a) const {
        if (th.size() != d) throw UsageError("transition: theta has wrong length");
        DistributionCheck out;
        out.p = features(s, a).transpose() * th;
        out.min_entry = out.p.minCoeff();
        out.sum = out.p.sum();
        out.valid = out.min_entry >= -kDistributionTol;
        return out;
    }

    const TabularModel& true_model() const { return true_model_; }

    /// Tabular kernel induced by per-step mixing vectors (scaled view). Rows are
    /// taken as computed; use validate_model to check them.
    TabularModel model_from(const std::vector<Vec>& thetas) const {
        if (static_cast<int>(thetas.size()) != H) throw UsageError("model_from: need H vectors");
        TabularModel m;
        m.S = S;
        m.A = A;
        m.H = H;
        m.init = init;
        m.P.assign(H, Mat(S * A, S));
        for (int h = 0; h < H; ++h) {
            if (thetas[h].size() != d) throw UsageError("model_from: theta has wrong length");
            for (int sa = 0; sa < S * A; ++sa)
                m.P[h].row(sa).noalias() = thetas[h].transpose() * features_[sa];
        }
        return m;
    }

    Vec raw_view(const Vec& scaled) const { return scaled * feature_scale; }
    Vec scaled_view(const Vec& raw) const { return raw / feature_scale; }

private:
    std::vector<Mat> features_;
    TabularModel true_model_;

    void check_pair(int s, int a) const {
        if (s < 0 || s >= S || a < 0 || a >= A) throw UsageError("state-action index out of range");
    }

    void check_shapes() const {
        if (S < 1 || A < 1 || H < 0 || d < 1) throw UsageError("MixtureInstance: bad dimensions");
        for (const auto& k : basis)
            if (k.rows() != S * A || k.cols() != S)
                throw UsageError("MixtureInstance: basis kernel has wrong shape");
        if (static_cast<int>(theta.size()) != H) throw UsageError("MixtureInstance: need H thetas");
        for (const auto& t : theta)
            if (t.size() != d) throw UsageError("MixtureInstance: theta has wrong length");
        if (init.size() != S) throw UsageError("MixtureInstance: init has wrong length");
    }
};

/// Row-sum and nonnegativity residuals of the kernel induced by `thetas`.
inline ModelReport validate_model(const MixtureInstance& inst, const std::vector<Vec>& thetas) {
    ModelReport rep;
    if (static_cast<int>(thetas.size()) != inst.H) {
        rep.pass = false;
        rep.row_sum_residual = std::numeric_limits<double>::infinity();
        return rep;
    }
    double worst = -1.0;
    for (int h = 0; h < inst.H; ++h) {
        for (int s = 0; s < inst.S; ++s) {
            for (int a = 0; a < inst.A; ++a) {
                const Vec p = inst.features(s, a).transpose() * thetas[h];
                const double rs = std::abs(p.sum() - 1.0);
                const double neg = std::max(0.0, -p.minCoeff());
                rep.row_sum_residual = std::max(rep.row_sum_residual, rs);
                rep.negativity_residual = std::max(rep.negativity_residual, neg);
                if (std::max(rs, neg) > worst) {
                    worst = std::max(rs, neg);
                    rep.worst_h = h;
                    rep.worst_s = s;
                    rep.worst_a = a;
                }
            }
        }
    }
    rep.pass = rep.max_residual() <= kModelTol;
    return rep;
}

inline void check_kernel_rows(const TabularModel& m) {
    for (int h = 0; h < m.H; ++h)
        for (int sa = 0; sa < m.S * m.A; ++sa) {
            const auto row = m.P[h].row(sa);
            if (row.minCoeff() < -kDistributionTol || std::abs(row.sum() - 1.0) > kDistributionTol)
                throw SamplingError("invalid transition row at step " + std::to_string(h));
        }
}

/// Draws one episode of `policy`. Rows are checked as they are used.
inline Trajectory sample_episode(const TabularModel& m, const Policy& policy, Rng& rng,
                                 int episode = 0, std::uint64_t seed = 0) {
    if (!policy.well_formed(m.A) || policy.H != m.H || policy.S != m.S)
        throw UsageError("sample_episode: malformed policy");
    auto draw = [&](const auto& row) {
        if (row.minCoeff() < -kDistributionTol || std::abs(row.sum() - 1.0) > kDistributionTol)
            throw SamplingError("sample_episode: invalid distribution");
        thread_local std::vector<double> buf;
        buf.assign(row.size(), 0.0);
        for (Eigen::Index i = 0; i < row.size(); ++i) buf[i] = std::max(0.0, row[i]);
        return sample_categorical(buf, rng);
    };
    Trajectory t;
    t.episode = episode;
    t.seed = seed;
    t.states.reserve(m.H + 1);
    t.actions.reserve(m.H);
    t.states.push_back(draw(m.init.transpose()));
    for (int h = 0; h < m.H; ++h) {
        const int s = t.states.back();
        const int a = policy(h, s);
        t.actions.push_back(a);
        t.states.push_back(draw(m.row(h, s, a)));
    }
    return t;
}

struct PolicyValue {
    std::vector<Vec> V;  // H + 1 tables
    double start_value = 0.0;
};

struct PlanResult {
    Policy policy;
    std::vector<Vec> V;
    double start_value = 0.0;
};

inline void check_reward_shape(const TabularModel& m, const Reward& R) {
    if (R.H != m.H || R.S != m.S || R.A != m.A) throw UsageError("reward shape mismatch");
}

inline PolicyValue evaluate_policy(const TabularModel& m, const Reward& R, const Policy& pi) {
    check_reward_shape(m, R);
    if (!pi.well_formed(m.A) || pi.H != m.H || pi.S != m.S) throw UsageError("malformed policy");
    PolicyValue out;
    out.V.assign(m.H + 1, Vec::Zero(m.S));
    for (int h = m.H - 1; h >= 0; --h)
        for (int s = 0; s < m.S; ++s) {
            const int a = pi(h, s);
            out.V[h][s] = R(h, s, a) + m.expect(h, s, a, out.V[h + 1]);
        }
    out.start_value = m.init.dot(out.V[0]);
    return out;
}

/// Greedy backward induction; ties go to the lowest action index.
inline PlanResult optimal_policy_dp(const TabularModel& m, const Reward& R) {
    check_reward_shape(m, R);
    PlanResult out;
    out.policy = Policy(m.H, m.S);
    out.V.assign(m.H + 1, Vec::Zero(m.S));
    for (int h = m.H - 1; h >= 0; --h)
        for (int s = 0; s < m.S; ++s) {
            double best = -std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int a = 0; a < m.A; ++a) {
                const double q = R(h, s, a) + m.expect(h, s, a, out.V[h + 1]);
                if (q > best) {
                    best = q;
                    arg = a;
                }
            }
            out.V[h][s] = best;
            out.policy(h, s) = arg;
        }
    out.start_value = m.init.dot(out.V[0]);
    return out;
}

/// Exhaustive maximum over all A^(S*H) deterministic Markov policies. Test oracle.
inline double enumerate_policies_oracle(const TabularModel& m, const Reward& R,
                                        double max_policies = 1e6) {
    check_reward_shape(m, R);
    const double count = std::pow(static_cast<double>(m.A), static_cast<double>(m.S) * m.H);
    if (count > max_policies) throw UsageError("enumerate_policies_oracle: policy space too large");
    if (m.H == 0) return 0.0;
    Policy pi(m.H, m.S);
    double best = -std::numeric_limits<double>::infinity();
    while (true) {
        best = std::max(best, evaluate_policy(m, R, pi).start_value);
        std::size_t i = 0;
        for (; i < pi.act.size(); ++i) {
            if (++pi.act[i] < m.A) break;
            pi.act[i] = 0;
        }
        if (i == pi.act.size()) break;
    }
    return best;
}

}  // namespace rfx
