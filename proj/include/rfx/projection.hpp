#pragma once

// Projection onto the set of valid mixing vectors, optionally intersected
// with ellipsoidal confidence constraints, in an arbitrary quadratic metric.
//
// Everything is solved by Dykstra's alternating projections after whitening
// the metric (y = G^{1/2} x), so each individual set has a cheap Euclidean
// projection: hyperplane and halfspaces in closed form, ellipsoids through a
// one-dimensional secular equation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfx/core.hpp"

namespace rfx {

enum class Parameterization { BasisSimplex, GeneralFinite };

inline const char* to_string(Parameterization p) {
    return p == Parameterization::BasisSimplex ? "basis-simplex" : "general-finite";
}

inline Parameterization parse_parameterization(const std::string& s) {
    if (s == "basis-simplex" || s == "simplex") return Parameterization::BasisSimplex;
    if (s == "general-finite" || s == "general") return Parameterization::GeneralFinite;
    throw UsageError("unknown parameterization: " + s);
}

/// { x : eq^T x = eq_rhs, g^T x >= 0 for g in ge }, with a strictly interior point.
struct ValiditySet {
    Vec eq;
    double eq_rhs = 0.0;
    std::vector<Vec> ge;  // unit normals
    Vec interior;

    double violation(const Vec& x) const {
        double v = std::abs(eq.dot(x) - eq_rhs) / eq.norm();
        for (const auto& g : ge) v = std::max(v, -g.dot(x));
        return v;
    }
};

/// Validity constraints in the scaled view. Row sums reduce to one hyperplane
/// because every basis kernel is stochastic.
inline ValiditySet validity_set(const MixtureInstance& inst, Parameterization param) {
    ValiditySet vs;
    const int d = inst.d;
    vs.eq = Vec::Ones(d);
    vs.eq_rhs = inst.bound();
    vs.interior = Vec::Constant(d, inst.bound() / d);
    auto push_unique = [&](Vec g) {
        const double n = g.norm();
        if (n <= 1e-14) return;
        g /= n;
        for (const auto& existing : vs.ge)
            if ((existing - g).lpNorm<Eigen::Infinity>() < 1e-13) return;
        vs.ge.push_back(std::move(g));
    };
    if (param == Parameterization::BasisSimplex) {
        for (int i = 0; i < d; ++i) push_unique(Vec::Unit(d, i));
    } else {
        for (int s = 0; s < inst.S; ++s)
            for (int a = 0; a < inst.A; ++a) {
                const Mat& F = inst.features(s, a);
                for (int n = 0; n < inst.S; ++n) push_unique(F.col(n));
            }
    }
    return vs;
}

/// Snapshot of one confidence ellipsoid ||x - center||_M <= radius.
/// The matrix is shared between constraints of the same snapshot.
struct Ellipsoid {
    Vec center;
    std::shared_ptr<const Mat> M;
    double radius = 0.0;
    Vec Mc;             // M * center
    double cMc = 0.0;   // center^T M center

    Ellipsoid() = default;
    Ellipsoid(Vec c, std::shared_ptr<const Mat> m, double r)
        : center(std::move(c)), M(std::move(m)), radius(r) {
        Mc = (*M) * center;
        cMc = center.dot(Mc);
    }

    /// ||x - center||_M through the expanded quadratic (fast path).
    double distance(const Vec& x) const {
        const double q = x.dot((*M) * x) - 2.0 * Mc.dot(x) + cMc;
        return std::sqrt(std::max(0.0, q));
    }

    double slack(const Vec& x) const { return radius - distance(x); }
};

struct ProjectionResult {
    Vec x;
    bool converged = false;
    int iterations = 0;
    double validity_violation = 0.0;
    double ellipsoid_violation = 0.0;  // max of distance - radius; negative when strictly inside
    int violated_index = -1;
};

struct ProjectionOptions {
    int max_iterations = 10000;
    double tolerance = 1e-9;
    double ellipsoid_tolerance = 1e-8;
    int max_active_rounds = 25;
};

namespace detail {

struct Whitening {
    Mat L, Linv;

    explicit Whitening(const Mat& G) {
        Eigen::SelfAdjointEigenSolver<Mat> es(G);
        const Vec ev = es.eigenvalues().cwiseMax(1e-300);
        L = es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
        Linv = es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() *
               es.eigenvectors().transpose();
    }
};

/// Euclidean projection of z onto { y : (y - c)^T M (y - c) <= r^2 }, with M
/// given by its eigendecomposition.
inline Vec project_ellipsoid(const Vec& z, const Vec& c, const Mat& Q, const Vec& D, double r) {
    const Vec w = Q.transpose() * (z - c);
    auto f = [&](double mu) {
        return (D.array() * w.array().square() / (1.0 + mu * D.array()).square()).sum();
    };
    const double r2 = r * r;
    if (f(0.0) <= r2) return z;
    double lo = 0.0, hi = 1.0;
    while (f(hi) > r2 && hi < 1e300) hi *= 4.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) > r2 ? lo : hi) = mid;
    }
    const Vec y = (w.array() / (1.0 + hi * D.array())).matrix();
    return c + Q * y;
}

}  // namespace detail

namespace detail {

/// Active-set Dykstra. `find(x, tol, out)` fills `out` with the indices of
/// ellipsoids violated by more than tol and returns (worst violation, its
/// index), or (-inf, -1) when there are none; `get(i)` returns ellipsoid i.
template <class Find, class Get>
ProjectionResult project_active(const Vec& x0, const Mat& G, const ValiditySet& vs, bool any_ellipsoids,
                                Find&& find, Get&& get, const ProjectionOptions& opt) {
    const int d = static_cast<int>(x0.size());
    const Whitening W(G);

    // Sets in whitened coordinates.
    Vec eq_y = W.Linv * vs.eq;
    const double eq_norm2 = eq_y.squaredNorm();
    std::vector<Vec> ge_y;
    ge_y.reserve(vs.ge.size());
    for (const auto& g : vs.ge) {
        Vec gy = W.Linv * g;
        gy /= gy.norm();
        ge_y.push_back(std::move(gy));
    }
    struct ActiveEllipsoid {
        int index;
        Vec c;
        Mat Q;
        Vec D;
        double r;
    };
    std::vector<ActiveEllipsoid> active;

    ProjectionResult res;
    const Vec y0 = W.L * x0;
    Vec y = y0;
    std::vector<int> violated;
    for (int round = 0; round < opt.max_active_rounds; ++round) {
        // Dykstra over hyperplane, halfspaces and active ellipsoids.
        const std::size_t nsets = 1 + ge_y.size() + active.size();
        std::vector<Vec> incr(nsets, Vec::Zero(d));
        y = y0;
        bool converged = false;
        for (int it = 0; it < opt.max_iterations; ++it) {
            ++res.iterations;
            const Vec before = y;
            std::size_t k = 0;
            {
                const Vec z = y + incr[k];
                const Vec p = z - eq_y * ((eq_y.dot(z) - vs.eq_rhs) / eq_norm2);
                incr[k] = z - p;
                y = p;
                ++k;
            }
            for (const auto& g : ge_y) {
                const Vec z = y + incr[k];
                const double v = g.dot(z);
                const Vec p = v < 0.0 ? Vec(z - v * g) : z;
                incr[k] = z - p;
                y = p;
                ++k;
            }
            for (const auto& e : active) {
                const Vec z = y + incr[k];
                const Vec p = project_ellipsoid(z, e.c, e.Q, e.D, e.r);
                incr[k] = z - p;
                y = p;
                ++k;
            }
            if ((y - before).norm() <= opt.tolerance * std::max(1.0, y.norm())) {
                converged = true;
                break;
            }
        }
        res.converged = converged;
        if (!any_ellipsoids) break;
        const Vec x = W.Linv * y;
        find(x, opt.ellipsoid_tolerance, violated);
        bool added = false;
        for (int i : violated) {
            if (std::any_of(active.begin(), active.end(),
                            [i](const ActiveEllipsoid& a) { return a.index == i; }))
                continue;
            const Ellipsoid& e = get(i);
            const Mat My = W.Linv * (*e.M) * W.Linv;
            Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (My + My.transpose()));
            active.push_back({i, W.L * e.center, es.eigenvectors(), es.eigenvalues().cwiseMax(0.0),
                              e.radius});
            added = true;
        }
        if (!added) break;
    }

    // Restore exact validity by pulling toward the interior point along the
    // segment; the hyperplane is affine so it survives the convex combination.
    Vec x = W.Linv * y;
    x -= vs.eq * ((vs.eq.dot(x) - vs.eq_rhs) / vs.eq.squaredNorm());
    double t = 1.0;
    for (const auto& g : vs.ge) {
        const double gi = g.dot(vs.interior), gx = g.dot(x);
        if (gx < 0.0 && gi > gx) t = std::min(t, gi / (gi - gx));
    }
    if (t < 1.0) x = vs.interior + t * (x - vs.interior);
    res.x = x;
    res.validity_violation = vs.violation(x);
    if (any_ellipsoids) {
        const auto [worst, worst_i] = find(x, opt.ellipsoid_tolerance, violated);
        res.ellipsoid_violation = worst;
        res.violated_index = worst > opt.ellipsoid_tolerance ? worst_i : -1;
    }
    return res;
}

}  // namespace detail

/// Minimizes ||x - x0||_G^2 over the validity set intersected with the given
/// ellipsoids. Ellipsoids enter an active set only once violated, so long
/// constraint lists cost one membership sweep per round.
inline ProjectionResult project_onto(const Vec& x0, const Mat& G, const ValiditySet& vs,
                                     std::span<const Ellipsoid> ellipsoids = {},
                                     const ProjectionOptions& opt = {}) {
    auto find = [&](const Vec& x, double tol, std::vector<int>& out) {
        out.clear();
        double worst = -std::numeric_limits<double>::infinity();
        int worst_i = -1;
        for (int i = 0; i < static_cast<int>(ellipsoids.size()); ++i) {
            const double v = ellipsoids[i].distance(x) - ellipsoids[i].radius;
            if (v > worst) {
                worst = v;
                worst_i = i;
            }
            if (v > tol) out.push_back(i);
        }
        return std::pair{worst, worst_i};
    };
    auto get = [&](int i) -> const Ellipsoid& { return ellipsoids[i]; };
    return detail::project_active(x0, G, vs, !ellipsoids.empty(), find, get, opt);
}

/// Largest ellipsoid violation (distance - radius) and its index; -1 when all hold.
inline std::pair<double, int> ellipsoid_membership(const Vec& x, std::span<const Ellipsoid> es,
                                                   double tol = 1e-8) {
    double worst = -std::numeric_limits<double>::infinity();
    int idx = -1;
    for (int i = 0; i < static_cast<int>(es.size()); ++i) {
        const double v = es[i].distance(x) - es[i].radius;
        if (v > worst) {
            worst = v;
            idx = i;
        }
    }
    return {worst, worst > tol ? idx : -1};
}

}  // namespace rfx
