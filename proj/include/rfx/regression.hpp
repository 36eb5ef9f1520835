#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>

#include "rfx/core.hpp"

namespace rfx {

/// Regularized Gram matrix lambda*I + sum_t w_t x_t x_t^T with a maintained
/// inverse and the weighted response sum b = sum_t w_t x_t y_t.
///
/// The inverse is updated by Sherman-Morrison and rebuilt from scratch every
/// kRefactorEvery updates, which keeps drift well below 1e-9 for d <= 64.
class CovarianceAccumulator {
public:
    static constexpr int kRefactorEvery = 512;

    CovarianceAccumulator() = default;

    CovarianceAccumulator(int dim, double lambda) : d_(dim), lambda_(lambda) {
        if (dim < 1) throw UsageError("CovarianceAccumulator: dimension must be positive");
        if (!(lambda > 0.0) || !std::isfinite(lambda))
            throw UsageError("CovarianceAccumulator: lambda must be positive");
        cov_ = Mat::Identity(dim, dim) * lambda;
        inv_ = Mat::Identity(dim, dim) / lambda;
        b_ = Vec::Zero(dim);
    }

    void update(const Vec& x, double y, double w = 1.0) {
        if (x.size() != d_) throw UsageError("cov_update: feature has wrong length");
        if (w < 0.0) throw UsageError("cov_update: negative weight");
        if (!x.allFinite() || !std::isfinite(y) || !std::isfinite(w))
            throw UsageError("cov_update: non-finite input");
        if (w == 0.0) return;
        ++n_;
        cov_.noalias() += w * x * x.transpose();
        b_.noalias() += (w * y) * x;
        if (++since_refactor_ >= kRefactorEvery) {
            refactor();
            return;
        }
        const Vec v = inv_ * x;
        const double denom = 1.0 + w * x.dot(v);
        inv_.noalias() -= (w / denom) * v * v.transpose();
    }

    /// Rebuilds the inverse from the Gram matrix.
    void refactor() {
        inv_ = cov_.ldlt().solve(Mat::Identity(d_, d_));
        inv_ = 0.5 * (inv_ + inv_.transpose()).eval();
        since_refactor_ = 0;
    }

    double elliptical_norm_sq(const Vec& x) const {
        if (x.size() != d_) throw UsageError("elliptical_norm: wrong length");
        return std::max(0.0, x.dot(inv_ * x));
    }

    double elliptical_norm(const Vec& x) const { return std::sqrt(elliptical_norm_sq(x)); }

    /// theta = Lambda^{-1} b, solved against Lambda directly rather than through
    /// the maintained inverse so tiny lambda stays accurate.
    Vec ridge_solve() const {
        if (n_ == 0 || b_.isZero(0.0)) return Vec::Zero(d_);
        return cov_.ldlt().solve(b_);
    }

    int dim() const { return d_; }
    double lambda() const { return lambda_; }
    int count() const { return n_; }
    const Mat& covariance() const { return cov_; }
    const Mat& inverse() const { return inv_; }
    const Vec& response() const { return b_; }

private:
    int d_ = 0;
    double lambda_ = 1.0;
    int n_ = 0;
    int since_refactor_ = 0;
    Mat cov_;
    Mat inv_;
    Vec b_;
};

struct PotentialCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double log_det_ratio = 0.0;
    bool pass = true;
};

/// Elliptical potential inequality for the stream x_1..x_n:
///   sum_t min{1, ||x_t||^2_{V_{t-1}^{-1}}}
///     <= 2 (d log((trace(lambda I) + n L^2) / d) - log det(lambda I)).
inline PotentialCheck elliptical_potential_check(std::span<const Vec> stream, double lambda) {
    PotentialCheck out;
    if (stream.empty()) return out;
    const int d = static_cast<int>(stream.front().size());
    CovarianceAccumulator acc(d, lambda);
    double L2 = 0.0;
    for (const auto& x : stream) {
        out.lhs += std::min(1.0, acc.elliptical_norm_sq(x));
        acc.update(x, 0.0);
        L2 = std::max(L2, x.squaredNorm());
    }
    const double n = static_cast<double>(stream.size());
    const double log_det0 = d * std::log(lambda);
    out.log_det_ratio = acc.covariance().ldlt().vectorD().array().log().sum() - log_det0;
    out.rhs = 2.0 * (d * std::log((d * lambda + n * L2) / d) - log_det0);
    out.pass = out.lhs <= out.rhs + 1e-9;
    return out;
}

}  // namespace rfx
