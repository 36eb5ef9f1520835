#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rfx/regression.hpp"
#include "rfx/rng.hpp"

using namespace rfx;

namespace {

Vec normal_vec(int d, Rng& rng) {
    Vec x(d);
    for (auto& v : x) v = standard_normal(rng);
    return x;
}

}  // namespace

TEST(CovInit, IdentityAndInverse) {
    const CovarianceAccumulator acc(2, 1.0);
    EXPECT_EQ(acc.covariance(), Mat::Identity(2, 2));
    EXPECT_EQ(acc.inverse(), Mat::Identity(2, 2));
    EXPECT_EQ(acc.response(), Vec::Zero(2));
    EXPECT_EQ(acc.count(), 0);
}

TEST(CovInit, LambdaFromBound) {
    const double B = 2.0;
    const CovarianceAccumulator acc(3, 1.0 / (B * B));
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(acc.covariance()(i, i), 0.25);
    EXPECT_NEAR(acc.elliptical_norm(Vec::Unit(3, 0)), 2.0, 1e-15);
}

TEST(CovInit, RejectsNonpositiveLambda) {
    EXPECT_THROW(CovarianceAccumulator(2, 0.0), UsageError);
    EXPECT_THROW(CovarianceAccumulator(2, -1.0), UsageError);
    EXPECT_THROW(CovarianceAccumulator(0, 1.0), UsageError);
}

TEST(CovUpdate, ZeroWeightLeavesAccumulatorUnchanged) {
    CovarianceAccumulator acc(3, 0.5);
    acc.update(Vec::Ones(3), 2.0);
    const Mat cov = acc.covariance(), inv = acc.inverse();
    const Vec b = acc.response();
    acc.update(Vec::Constant(3, 4.0), 7.0, 0.0);
    EXPECT_EQ(acc.covariance(), cov);
    EXPECT_EQ(acc.inverse(), inv);
    EXPECT_EQ(acc.response(), b);
    EXPECT_EQ(acc.count(), 1);
}

TEST(CovUpdate, RankOneOnBasisVector) {
    CovarianceAccumulator acc(3, 1.0);
    acc.update(Vec::Unit(3, 0), 1.0);
    Vec diag(3);
    diag << 2.0, 1.0, 1.0;
    EXPECT_EQ(acc.covariance(), Mat(diag.asDiagonal()));
    EXPECT_NEAR(acc.inverse()(0, 0), 0.5, 1e-15);
}

TEST(CovUpdate, IncrementalInverseTracksDirectInverse) {
    for (int d : {8, 16}) {
        Rng rng(100 + d);
        CovarianceAccumulator acc(d, 1.0);
        for (int t = 0; t < 10000; ++t) acc.update(normal_vec(d, rng), standard_normal(rng), uniform01(rng) * 2);
        const Mat direct = acc.covariance().inverse();
        EXPECT_LE((acc.inverse() - direct).norm() / direct.norm(), 1e-8) << d;
        EXPECT_LE((acc.covariance() * acc.inverse() - Mat::Identity(d, d)).norm(), 1e-8) << d;
        Eigen::SelfAdjointEigenSolver<Mat> es(acc.covariance());
        EXPECT_GE(es.eigenvalues().minCoeff(), 1.0 - 1e-10);
    }
}

TEST(CovUpdate, RejectsBadInput) {
    CovarianceAccumulator acc(2, 1.0);
    EXPECT_THROW(acc.update(Vec::Ones(2), 1.0, -1.0), UsageError);
    EXPECT_THROW(acc.update(Vec::Ones(3), 1.0), UsageError);
    EXPECT_THROW(acc.update(Vec::Constant(2, std::nan("")), 1.0), UsageError);
}

TEST(EllipticalNorm, ZeroVector) {
    CovarianceAccumulator acc(4, 2.0);
    EXPECT_EQ(acc.elliptical_norm(Vec::Zero(4)), 0.0);
}

TEST(EllipticalNorm, DiagonalClosedForm) {
    const CovarianceAccumulator acc(3, 4.0);
    EXPECT_DOUBLE_EQ(acc.elliptical_norm(Vec::Unit(3, 0)), 0.5);
}

TEST(EllipticalNorm, MatchesLinearSolve) {
    Rng rng(8);
    for (int d = 1; d <= 8; ++d) {
        CovarianceAccumulator acc(d, 0.3);
        for (int t = 0; t < 3 * d; ++t) acc.update(normal_vec(d, rng), 0.0);
        const Vec x = normal_vec(d, rng);
        const Vec z = acc.covariance().ldlt().solve(x);
        EXPECT_NEAR(acc.elliptical_norm(x), std::sqrt(x.dot(z)), 1e-12 * std::max(1.0, x.norm()));
    }
}

TEST(EllipticalNorm, LoewnerMonotone) {
    Rng rng(13);
    const int d = 5;
    CovarianceAccumulator acc(d, 1.0);
    std::vector<Vec> probes;
    for (int i = 0; i < 10; ++i) probes.push_back(normal_vec(d, rng));
    std::vector<double> last(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) last[i] = acc.elliptical_norm(probes[i]);
    for (int t = 0; t < 2000; ++t) {
        acc.update(normal_vec(d, rng), 0.0, uniform01(rng));
        for (std::size_t i = 0; i < probes.size(); ++i) {
            const double n = acc.elliptical_norm(probes[i]);
            ASSERT_LE(n, last[i] + 1e-12) << t;
            last[i] = n;
        }
    }
}

TEST(RidgeSolve, NoSamplesGivesZero) {
    const CovarianceAccumulator acc(4, 1.0);
    EXPECT_EQ(acc.ridge_solve(), Vec::Zero(4));
}

TEST(RidgeSolve, RecoversPlantedParameter) {
    Rng rng(21);
    const int d = 5;
    const Vec theta = normal_vec(d, rng);
    CovarianceAccumulator acc(d, 1e-10);
    for (int i = 0; i < d; ++i) {
        const Vec x = Vec::Unit(d, i) + 0.3 * normal_vec(d, rng);
        acc.update(x, theta.dot(x));
    }
    EXPECT_LE((acc.ridge_solve() - theta).norm(), 1e-6);
}

TEST(RidgeSolve, DuplicateEqualsDoubleWeight) {
    Rng rng(5);
    CovarianceAccumulator a(3, 1.0), b(3, 1.0);
    for (int t = 0; t < 5; ++t) {
        const Vec x = normal_vec(3, rng);
        const double y = standard_normal(rng);
        a.update(x, y);
        a.update(x, y);
        b.update(x, y, 2.0);
    }
    EXPECT_LE((a.ridge_solve() - b.ridge_solve()).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(RidgeSolve, SatisfiesNormalEquations) {
    Rng rng(6);
    CovarianceAccumulator acc(6, 0.1);
    for (int t = 0; t < 1500; ++t) acc.update(normal_vec(6, rng) / 3.0, standard_normal(rng));
    const Vec th = acc.ridge_solve();
    EXPECT_LE((acc.covariance() * th - acc.response()).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(RidgeSolve, MinimizesPenalizedLoss) {
    Rng rng(31);
    const int d = 3;
    const double lambda = 0.7;
    CovarianceAccumulator acc(d, lambda);
    std::vector<Vec> xs;
    std::vector<double> ys, ws;
    for (int t = 0; t < 20; ++t) {
        xs.push_back(normal_vec(d, rng));
        ys.push_back(standard_normal(rng));
        ws.push_back(uniform01(rng) + 0.5);
        acc.update(xs.back(), ys.back(), ws.back());
    }
    auto loss = [&](const Vec& th) {
        double l = lambda * th.squaredNorm();
        for (std::size_t t = 0; t < xs.size(); ++t) l += ws[t] * std::pow(th.dot(xs[t]) - ys[t], 2);
        return l;
    };
    const Vec th = acc.ridge_solve();
    for (int i = 0; i < 50; ++i) EXPECT_GE(loss(th + 1e-3 * normal_vec(d, rng)), loss(th));
}

TEST(EllipticalPotential, EmptyStreamPasses) {
    const auto r = elliptical_potential_check(std::span<const Vec>{}, 1.0);
    EXPECT_EQ(r.lhs, 0.0);
    EXPECT_TRUE(r.pass);
}

TEST(EllipticalPotential, UniformSphereStream) {
    Rng rng(3);
    std::vector<Vec> xs;
    for (int t = 0; t < 10000; ++t) {
        const Vec x = normal_vec(4, rng);
        xs.push_back(x / x.norm());
    }
    const auto r = elliptical_potential_check(xs, 1.0);
    EXPECT_TRUE(r.pass) << r.lhs << " vs " << r.rhs;
    EXPECT_GT(r.lhs, 0.0);
}

TEST(EllipticalPotential, RepeatedDirection) {
    std::vector<Vec> xs(5000, Vec::Unit(4, 2));
    const auto r = elliptical_potential_check(xs, 1.0);
    EXPECT_TRUE(r.pass) << r.lhs << " vs " << r.rhs;
    // Repeated e_3: the sum is a (slowly growing) harmonic series.
    double harmonic = 0.0;
    for (int t = 0; t < 5000; ++t) harmonic += std::min(1.0, 1.0 / (1.0 + t));
    EXPECT_NEAR(r.lhs, harmonic, 1e-9);
}
