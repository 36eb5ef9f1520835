#include <gtest/gtest.h>

#include <cmath>

#include "rfx/hoeffding.hpp"
#include "rfx/instances.hpp"

using namespace rfx;

namespace {

Mat random_features(int d, int S, Rng& rng) {
    Mat F(d, S);
    for (auto& x : F.reshaped()) x = uniform01(rng) / std::sqrt(double(d));
    return F;
}

// Brute-force max of ||root F V||_2 over V in {0,H}^S.
double box_oracle(const Mat& F, const Mat& root, double H) {
    const int S = static_cast<int>(F.cols());
    double best = 0.0;
    for (int mask = 0; mask < (1 << S); ++mask) {
        Vec V(S);
        for (int s = 0; s < S; ++s) V[s] = (mask >> s) & 1 ? H : 0.0;
        best = std::max(best, (root * F * V).norm());
    }
    return best;
}

// Deterministic chain: (s, a) moves to (s + a + 1) mod S under every basis kernel.
MixtureInstance deterministic_instance(int S, int A, int H, int d) {
    std::vector<Mat> basis;
    for (int i = 0; i < d; ++i) {
        Mat P = Mat::Zero(S * A, S);
        for (int s = 0; s < S; ++s)
            for (int a = 0; a < A; ++a) P(s * A + a, (s + a + 1) % S) = 1.0;
        basis.push_back(P);
    }
    return MixtureInstance(S, A, H, basis, std::vector<Vec>(H, Vec::Constant(d, std::sqrt(double(d)) / d)),
                           Vec::Unit(S, 0));
}

}  // namespace

TEST(BetaHoeffding, AdditiveTermIsOne) {
    const double B = 3.0, lambda = 1.0 / (B * B);
    const int d = 4, H = 5, K = 200;
    const double delta = 0.05;
    const double lead = H * std::sqrt(d * std::log(4.0 * H * H * H * K / (lambda * delta)));
    EXPECT_NEAR(beta_hoeffding(d, H, K, lambda, delta, B) - lead, 1.0, 1e-12);
}

TEST(BetaHoeffding, ClosedForm) {
    // 3 sqrt(2 log(4 * 27 * 100 / 0.1)) + 1
    const double expected = 3.0 * std::sqrt(2.0 * std::log(108000.0)) + 1.0;
    EXPECT_NEAR(beta_hoeffding(2, 3, 100, 1.0, 0.1, 1.0), expected, 1e-12);
    EXPECT_NEAR(beta_hoeffding(2, 3, 100, 1.0, 0.1, 1.0), 15.443613021329337, 1e-12);
}

TEST(BetaHoeffding, DoublingHorizonMoreThanDoubles) {
    for (int H : {1, 2, 5, 10})
        EXPECT_GT(beta_hoeffding(3, 2 * H, 64, 1.0 / 3, 0.1, std::sqrt(3.0)),
                  2.0 * beta_hoeffding(3, H, 64, 1.0 / 3, 0.1, std::sqrt(3.0)));
}

TEST(BetaHoeffding, DomainErrors) {
    EXPECT_THROW(beta_hoeffding(0, 2, 10, 1, 0.1, 1), UsageError);
    EXPECT_THROW(beta_hoeffding(2, 2, 10, 1, 1.0, 1), UsageError);
    EXPECT_THROW(beta_hoeffding(2, 2, 10, -1, 0.1, 1), UsageError);
}

TEST(HoeffdingConfigTest, ValidatesAndFloorsBeta) {
    const auto inst = generate_instance({3, 2, 2, 2, 0, "dirichlet"});
    HoeffdingConfig c;
    EXPECT_GE(c.beta_for(inst), std::sqrt(HoeffdingConfig::lambda_for(inst)) * inst.bound());
    c.delta = 0.0;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.tie_break = TieBreak::Identifiable;
    EXPECT_THROW(c.validate(), UsageError);
}

TEST(MaxUncertainty, ScalarCase) {
    Rng rng(1);
    const Mat F = random_features(1, 4, rng);
    const double Lambda = 2.5, H = 3.0;
    const Mat root = Mat::Constant(1, 1, 1.0 / std::sqrt(Lambda));
    const double expected = H * std::abs(F.sum()) / std::sqrt(Lambda);
    for (auto mode : {UncertaintyMode::Relaxed, UncertaintyMode::Exact}) {
        const auto u = max_uncertainty(F, root, H, mode);
        EXPECT_NEAR(u.score, expected, 1e-12);
        EXPECT_EQ(u.V, Vec::Constant(4, H));
    }
}

TEST(MaxUncertainty, RelaxedDominatesBoxEnumeration) {
    Mat F(2, 3);
    F << 0.5, 0.2, 0.0, 0.1, 0.3, 0.6;
    F /= std::sqrt(2.0);
    const Mat root = Mat::Identity(2, 2);
    const auto exact = max_uncertainty(F, root, 2.0, UncertaintyMode::Exact);
    const auto relaxed = max_uncertainty(F, root, 2.0, UncertaintyMode::Relaxed);
    EXPECT_NEAR(exact.score, box_oracle(F, root, 2.0), 1e-12);
    EXPECT_NEAR((root * F * exact.V).norm(), exact.score, 1e-12);
    EXPECT_GE(relaxed.score, exact.score);
}

TEST(MaxUncertainty, RelaxedMatchesSignEnumeration) {
    Rng rng(2);
    for (int rep = 0; rep < 50; ++rep) {
        const int d = 1 + rep % 5, S = 2 + rep % 7;
        const Mat F = random_features(d, S, rng);
        Mat A(d, d);
        for (auto& x : A.reshaped()) x = standard_normal(rng);
        const Mat root = (A * A.transpose() + Mat::Identity(d, d)).inverse();
        // max over f in [-H,H]^S of ||M f||_1 is attained at a vertex of the box.
        const Mat M = root * F;
        double brute = 0.0;
        for (int mask = 0; mask < (1 << S); ++mask) {
            Vec f(S);
            for (int s = 0; s < S; ++s) f[s] = (mask >> s) & 1 ? 1.5 : -1.5;
            brute = std::max(brute, (M * f).lpNorm<1>());
        }
        const auto u = max_uncertainty(F, root, 1.5, UncertaintyMode::Relaxed);
        EXPECT_NEAR(u.score, brute, 1e-10 * std::max(1.0, brute));
        EXPECT_GE(u.score, box_oracle(F, root, 1.5) - 1e-12);
        for (int s = 0; s < S; ++s) EXPECT_TRUE(u.V[s] == 0.0 || u.V[s] == 1.5);
    }
}

TEST(MaxUncertainty, ShrinksAlongConcentratedDirection) {
    Rng rng(3);
    const Mat F = random_features(3, 4, rng);
    CovarianceAccumulator acc(3, 1.0);
    const double before = max_uncertainty(F, inverse_root(acc), 2.0, UncertaintyMode::Exact).score;
    const Vec dir = (F * Vec::Ones(4)).normalized();
    for (int t = 0; t < 10; ++t) acc.update(dir, 0.0);
    const double after = max_uncertainty(F, inverse_root(acc), 2.0, UncertaintyMode::Exact).score;
    EXPECT_LT(after, before);
}

TEST(MaxUncertainty, Guards) {
    Rng rng(4);
    EXPECT_THROW(max_uncertainty(random_features(15, 2, rng), Mat::Identity(15, 15), 1.0, UncertaintyMode::Relaxed),
                 UsageError);
    EXPECT_THROW(max_uncertainty(random_features(2, 15, rng), Mat::Identity(2, 2), 1.0, UncertaintyMode::Exact),
                 UsageError);
}

TEST(InverseRoot, SquaresToInverse) {
    Rng rng(5);
    CovarianceAccumulator acc(4, 0.25);
    for (int t = 0; t < 30; ++t) {
        Vec x(4);
        for (auto& v : x) v = standard_normal(rng);
        acc.update(x, 0.0);
    }
    const Mat r = inverse_root(acc);
    EXPECT_LE((r * r - acc.covariance().inverse()).norm(), 1e-10);
}

TEST(OptimisticPass, FirstEpisodeSaturates) {
    const auto inst = generate_instance({5, 2, 4, 3, 1, "needle"});
    HoeffdingConfig c;
    const HoeffdingState st(inst.H, inst.d, HoeffdingConfig::lambda_for(inst));
    const auto pass = optimistic_backward_pass(inst, st, c.beta_for(inst), c.mode, c.tie_break);
    for (int h = 0; h < inst.H; ++h) EXPECT_EQ(pass.V[h], Vec::Constant(inst.S, inst.H));
    EXPECT_EQ(pass.V[inst.H], Vec::Zero(inst.S));
}

TEST(OptimisticPass, NullFeatureGivesNoBonus) {
    Mat P(4, 2);
    P << 0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0;  // (0, 1) has an all-zero row
    const MixtureInstance inst(2, 2, 2, {P}, {Vec::Ones(1), Vec::Ones(1)}, Vec::Unit(2, 0));
    HoeffdingState st(2, 1, 1.0);
    st.theta_hat = {Vec::Constant(1, 0.7), Vec::Constant(1, 0.7)};
    const auto pass = optimistic_backward_pass(inst, st, 5.0, UncertaintyMode::Relaxed, TieBreak::Lowest);
    for (int h = 0; h < 2; ++h) {
        EXPECT_EQ(pass.reward(h, 0, 1), 0.0);
        EXPECT_EQ(pass.Q[h](0, 1), 0.0);
        EXPECT_GT(pass.reward(h, 0, 0), 0.0);
    }
}

TEST(OptimisticPass, ClippedAcrossThousandEpisodes) {
    const auto inst = generate_instance({3, 2, 3, 2, 4, "dirichlet"});
    HoeffdingConfig c;
    c.K = 1000;
    c.beta_scale = 0.1;  // leave the clip so Q actually varies
    Rng rng(7);
    double qmax = -1, vmin = 1e9;
    run_hoeffding(c, inst, rng, [&](int, const OptimisticPass& p, const HoeffdingState&, const Trajectory&) {
        for (const auto& Q : p.Q) {
            qmax = std::max(qmax, Q.maxCoeff());
            vmin = std::min(vmin, Q.minCoeff());
        }
        for (const auto& V : p.V) vmin = std::min(vmin, V.minCoeff());
    });
    EXPECT_LE(qmax, inst.H);
    EXPECT_GE(vmin, 0.0);
}

TEST(RecordEpisode, DeterministicTargetIsMaximizerAtSuccessor) {
    const auto inst = deterministic_instance(4, 2, 3, 2);
    HoeffdingConfig c;
    c.K = 5;
    Rng rng(2);
    run_hoeffding(c, inst, rng, [&](int k, const OptimisticPass& p, const HoeffdingState& st, const Trajectory& t) {
        for (int h = 0; h < inst.H; ++h) {
            const int s = t.states[h], a = t.actions[h];
            const Vec& Vstar = p.maximizer[h][s * inst.A + a].V;
            EXPECT_EQ(st.targets[h][k], Vstar[t.states[h + 1]]);
            EXPECT_EQ(st.features[h][k], inst.phi_V(s, a, Vstar));
        }
    });
}

TEST(RecordEpisode, GramMatchesRecomputationAndRidgeMatches) {
    const auto inst = generate_instance({5, 2, 4, 3, 1, "needle"});
    HoeffdingConfig c;
    c.K = 60;
    Rng rng(3);
    const auto run = run_hoeffding(c, inst, rng);
    const double lambda = HoeffdingConfig::lambda_for(inst);
    for (int h = 0; h < inst.H; ++h) {
        ASSERT_EQ(static_cast<int>(run.state.features[h].size()), c.K);
        CovarianceAccumulator fresh(inst.d, lambda);
        Mat G = lambda * Mat::Identity(inst.d, inst.d);
        for (int t = 0; t < c.K; ++t) {
            const Vec& x = run.state.features[h][t];
            G += x * x.transpose();
            fresh.update(x, run.state.targets[h][t]);
            EXPECT_GE(run.state.targets[h][t], 0.0);
            EXPECT_LE(run.state.targets[h][t], inst.H);
        }
        EXPECT_LE((run.state.acc[h].covariance() - G).norm(), 1e-8 * G.norm());
        const Vec direct = G.ldlt().solve(fresh.response());
        EXPECT_LE((run.state.theta_hat[h] - direct).norm(), 1e-8 * std::max(1.0, direct.norm()));
    }
}

TEST(RecordEpisode, DuplicateEpisodesAddSameRankOneTwice) {
    const auto inst = generate_instance({4, 2, 2, 2, 6, "dirichlet"});
    HoeffdingState st(inst.H, inst.d, 0.5);
    const auto pass = optimistic_backward_pass(inst, st, 3.0, UncertaintyMode::Relaxed, TieBreak::Lowest);
    Rng rng(1);
    const auto traj = sample_episode(inst.true_model(), pass.policy, rng);
    record_episode(st, inst, traj, pass.maximizer);
    const Mat once = st.acc[0].covariance();
    record_episode(st, inst, traj, pass.maximizer);
    const Mat twice = st.acc[0].covariance();
    const Mat base = 0.5 * Mat::Identity(inst.d, inst.d);
    EXPECT_LE((twice - base - 2.0 * (once - base)).norm(), 1e-14);
    EXPECT_EQ(st.episodes, 2);
}

TEST(RecordEpisode, MissingCacheRejected) {
    const auto inst = generate_instance({3, 2, 2, 2, 0, "dirichlet"});
    HoeffdingState st(inst.H, inst.d, 0.5);
    Trajectory t{{0, 1, 2}, {0, 1}};
    std::vector<std::vector<Uncertainty>> empty(inst.H, std::vector<Uncertainty>(inst.S * inst.A));
    EXPECT_THROW(record_episode(st, inst, t, empty), UsageError);
}

TEST(Projection, ValidEstimateIsFixedPoint) {
    const auto inst = generate_instance({4, 2, 3, 3, 5, "dirichlet"});
    std::vector<CovarianceAccumulator> acc(inst.H, CovarianceAccumulator(inst.d, 1.0));
    const auto m = project_to_valid_model(inst, inst.theta, acc, 1.0, Parameterization::BasisSimplex);
    for (int h = 0; h < inst.H; ++h) {
        EXPECT_LE((m.theta[h] - inst.theta[h]).norm(), 1e-9);
        EXPECT_LE(m.slack[h], 1e-9);
    }
    EXPECT_FALSE(m.has_flag("slack-exceeds-beta"));
}

TEST(Projection, MatchesGridSearchOnSimplex) {
    const auto inst = generate_instance({3, 2, 1, 2, 2, "dirichlet"});
    const double r2 = std::sqrt(2.0);
    Vec th(2);
    th << 1.5, -0.2;
    const auto m = project_to_valid_model(inst, {th}, {CovarianceAccumulator(2, 1.0)}, 0.1,
                                          Parameterization::BasisSimplex);
    double best = 1e9, best_t = 0.0;
    for (double t = 0.0; t <= r2; t += 1e-4) {
        const double dist = std::hypot(t - th[0], r2 - t - th[1]);
        if (dist < best) best = dist, best_t = t;
    }
    EXPECT_NEAR(m.theta[0][0], best_t, 1e-4);
    EXPECT_NEAR(m.theta[0][1], r2 - best_t, 1e-4);
    EXPECT_NEAR(m.theta[0][0], r2, 1e-9);  // the projection sits at the vertex
    EXPECT_NEAR(m.slack[0], best, 1e-4);
    EXPECT_TRUE(m.has_flag("slack-exceeds-beta"));
}

TEST(Projection, OutputAlwaysValid) {
    Rng rng(8);
    for (int rep = 0; rep < 100; ++rep) {
        const InstanceSpec sp{2 + rep % 4, 1 + rep % 2, 2, 1 + rep % 4, static_cast<std::uint64_t>(rep),
                              rep % 3 == 0 ? "hetero" : "dirichlet"};
        const auto inst = generate_instance(sp);
        std::vector<Vec> raw;
        std::vector<CovarianceAccumulator> acc(inst.H, CovarianceAccumulator(inst.d, 1.0 / inst.d));
        for (int h = 0; h < inst.H; ++h) {
            Vec x(inst.d);
            for (auto& v : x) v = 4 * standard_normal(rng);
            raw.push_back(x);
            for (int t = 0; t < 5; ++t) {
                Vec z(inst.d);
                for (auto& v : z) v = standard_normal(rng);
                acc[h].update(z, 0.0);
            }
        }
        for (auto p : {Parameterization::BasisSimplex, Parameterization::GeneralFinite}) {
            const auto m = project_to_valid_model(inst, raw, acc, 1.0, p);
            EXPECT_LE(validate_model(inst, m.theta).max_residual(), 1e-8) << rep;
        }
    }
}

TEST(RunHoeffding, EmptyRunProjectsZero) {
    const auto inst = generate_instance({4, 2, 3, 3, 1, "needle"});
    HoeffdingConfig c;
    c.K = 0;
    Rng rng(1);
    const auto run = run_hoeffding(c, inst, rng);
    for (const auto& th : run.model.theta) EXPECT_LE((th - Vec::Constant(3, 1.0 / std::sqrt(3.0))).norm(), 1e-9);
    EXPECT_EQ(run.model.K, 0);
}

TEST(RunHoeffding, SingleComponentIsForced) {
    const auto inst = generate_instance({4, 2, 3, 1, 2, "dirichlet"});
    HoeffdingConfig c;
    c.K = 20;
    Rng rng(1);
    for (const auto& th : run_hoeffding(c, inst, rng).model.theta) EXPECT_NEAR(th[0], 1.0, 1e-12);
}

TEST(RunHoeffding, DeterministicPerSeed) {
    const auto inst = generate_instance({5, 2, 4, 3, 1, "needle"});
    HoeffdingConfig c;
    c.K = 30;
    Rng a(9), b(9);
    EXPECT_EQ(run_hoeffding(c, inst, a).model, run_hoeffding(c, inst, b).model);
}

TEST(RunHoeffding, ExactModeBonusNonIncreasing) {
    const auto inst = generate_instance({4, 2, 3, 2, 3, "dirichlet"});
    HoeffdingConfig c;
    c.K = 80;
    c.mode = UncertaintyMode::Exact;
    Rng rng(4);
    std::vector<double> last(inst.H * inst.S * inst.A, std::numeric_limits<double>::infinity());
    run_hoeffding(c, inst, rng, [&](int, const OptimisticPass&, const HoeffdingState& st, const Trajectory&) {
        for (int h = 0; h < inst.H; ++h) {
            const Mat root = inverse_root(st.acc[h]);
            for (int s = 0; s < inst.S; ++s)
                for (int a = 0; a < inst.A; ++a) {
                    const double u = max_uncertainty(inst.features(s, a), root, inst.H, UncertaintyMode::Exact).score;
                    double& prev = last[(h * inst.S + s) * inst.A + a];
                    EXPECT_LE(u, prev + 1e-12);
                    prev = u;
                }
        }
    });
}

TEST(RunHoeffding, UniformBaselineUsesSameRegression) {
    const auto inst = generate_instance({5, 2, 4, 3, 1, "needle"});
    HoeffdingConfig c;
    c.K = 40;
    c.explorer = Explorer::Uniform;
    Rng rng(5);
    const auto run = run_hoeffding(c, inst, rng);
    EXPECT_EQ(run.model.algorithm, "uniform-baseline");
    EXPECT_TRUE(validate_model(inst, run.model.theta).pass);
    for (int h = 0; h < inst.H; ++h) EXPECT_EQ(static_cast<int>(run.state.targets[h].size()), c.K);
}

TEST(RunHoeffding, BetaScaleIsFlagged) {
    const auto inst = generate_instance({3, 2, 2, 2, 1, "dirichlet"});
    HoeffdingConfig c;
    c.K = 3;
    c.beta_scale = 0.5;
    Rng rng(1);
    EXPECT_TRUE(run_hoeffding(c, inst, rng).model.has_flag("beta-scaled"));
}
