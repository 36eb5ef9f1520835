#include <gtest/gtest.h>

#include <cmath>

#include "rfx/core.hpp"
#include "rfx/hoeffding.hpp"
#include "rfx/instances.hpp"
#include "rfx/rewards.hpp"

using namespace rfx;

namespace {

// Two hand-built 3-state kernels over (s, a) rows, A = 2.
std::vector<Mat> hand_kernels() {
    Mat P1(6, 3), P2(6, 3);
    P1 << 0.5, 0.5, 0.0,
          1.0, 0.0, 0.0,
          0.2, 0.3, 0.5,
          0.0, 0.0, 1.0,
          0.1, 0.8, 0.1,
          0.3, 0.3, 0.4;
    P2 << 0.0, 1.0, 0.0,
          0.25, 0.25, 0.5,
          0.6, 0.2, 0.2,
          0.5, 0.0, 0.5,
          0.0, 0.0, 1.0,
          0.9, 0.1, 0.0;
    return {P1, P2};
}

MixtureInstance hand_instance(int H = 2) {
    const double r2 = std::sqrt(2.0);
    std::vector<Vec> th(H, Vec::Constant(2, r2 / 2.0));
    return MixtureInstance(3, 2, H, hand_kernels(), th, Vec::Unit(3, 0), "hand");
}

// Chain on S states: every action moves s to s + 1 (the last state loops).
MixtureInstance chain_instance(int S, int A, int H) {
    Mat P = Mat::Zero(S * A, S);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) P(s * A + a, std::min(s + 1, S - 1)) = 1.0;
    return MixtureInstance(S, A, H, {P}, std::vector<Vec>(H, Vec::Ones(1)), Vec::Unit(S, 0));
}

}  // namespace

TEST(PhiV, ZeroValueGivesZeroVector) {
    const auto inst = hand_instance();
    EXPECT_EQ(inst.phi_V(1, 0, Vec::Zero(3)), Vec::Zero(2));
}

TEST(PhiV, OnesGiveScaleInEveryEntry) {
    const auto inst = hand_instance();
    for (int s = 0; s < 3; ++s)
        for (int a = 0; a < 2; ++a) {
            const Vec x = inst.phi_V(s, a, Vec::Ones(3));
            for (int i = 0; i < 2; ++i) EXPECT_NEAR(x[i], 1.0 / std::sqrt(2.0), 1e-15);
        }
}

TEST(PhiV, MatchesDirectSummation) {
    const auto inst = hand_instance();
    const auto K = hand_kernels();
    Rng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        Vec V(3);
        for (auto& v : V) v = uniform01(rng);
        for (int s = 0; s < 3; ++s)
            for (int a = 0; a < 2; ++a) {
                const Vec x = inst.phi_V(s, a, V);
                for (int i = 0; i < 2; ++i) {
                    double sum = 0.0;
                    for (int n = 0; n < 3; ++n) sum += K[i](s * 2 + a, n) * V[n];
                    EXPECT_NEAR(x[i], sum / std::sqrt(2.0), 1e-15);
                }
            }
    }
}

TEST(PhiV, IsLinear) {
    const auto inst = generate_instance({6, 3, 2, 4, 3, "dirichlet"});
    Rng rng(11);
    Vec V1(6), V2(6);
    for (auto& v : V1) v = standard_normal(rng);
    for (auto& v : V2) v = standard_normal(rng);
    const double alpha = 0.7, beta = -2.3;
    for (int s = 0; s < 6; ++s)
        for (int a = 0; a < 3; ++a) {
            const Vec lhs = inst.phi_V(s, a, alpha * V1 + beta * V2);
            const Vec rhs = alpha * inst.phi_V(s, a, V1) + beta * inst.phi_V(s, a, V2);
            EXPECT_LE((lhs - rhs).lpNorm<Eigen::Infinity>(), 1e-12);
        }
}

TEST(PhiV, NormBoundedAtBoxVertices) {
    for (const char* fam : {"dirichlet", "needle", "hetero"}) {
        const auto inst = generate_instance({10, 2, 2, 5, 4, fam});
        double worst = 0.0;
        for (int mask = 0; mask < (1 << inst.S); ++mask) {
            Vec V(inst.S);
            for (int s = 0; s < inst.S; ++s) V[s] = (mask >> s) & 1;
            for (int s = 0; s < inst.S; ++s)
                for (int a = 0; a < inst.A; ++a) worst = std::max(worst, inst.phi_V(s, a, V).norm());
        }
        EXPECT_LE(worst, 1.0 + 1e-9) << fam;
    }
}

TEST(PhiV, RejectsBadIndices) {
    const auto inst = hand_instance();
    EXPECT_THROW(inst.phi_V(3, 0, Vec::Ones(3)), UsageError);
    EXPECT_THROW(inst.phi_V(0, -1, Vec::Ones(3)), UsageError);
    EXPECT_THROW(inst.phi_V(0, 0, Vec::Ones(4)), UsageError);
}

TEST(Transition, PureComponentReproducesKernel) {
    const auto inst = hand_instance();
    const auto K = hand_kernels();
    const Vec th = Vec::Unit(2, 0) * std::sqrt(2.0);
    for (int s = 0; s < 3; ++s)
        for (int a = 0; a < 2; ++a) {
            const auto t = inst.transition(th, s, a);
            EXPECT_TRUE(t.valid);
            EXPECT_LE((t.p - K[0].row(s * 2 + a).transpose()).lpNorm<Eigen::Infinity>(), 1e-15);
        }
}

TEST(Transition, UniformMixtureIsEntrywiseAverage) {
    const auto inst = hand_instance();
    const auto K = hand_kernels();
    const Vec th = Vec::Constant(2, std::sqrt(2.0) / 2.0);
    for (int s = 0; s < 3; ++s)
        for (int a = 0; a < 2; ++a) {
            const auto t = inst.transition(th, s, a);
            for (int n = 0; n < 3; ++n)
                EXPECT_NEAR(t.p[n], 0.5 * (K[0](s * 2 + a, n) + K[1](s * 2 + a, n)), 1e-15);
            EXPECT_NEAR(t.sum, 1.0, 1e-9);
        }
}

TEST(Transition, NegativeEntryIsFlagged) {
    const auto inst = hand_instance();
    Vec th(2);
    th << -1.0, 1.0 + std::sqrt(2.0);
    // Row (0, 0): P1 = (.5, .5, 0), P2 = (0, 1, 0); entry 0 is negative.
    const auto t = inst.transition(th, 0, 0);
    EXPECT_FALSE(t.valid);
    EXPECT_LT(t.min_entry, -1e-9);
    EXPECT_THROW(inst.transition(Vec::Ones(3), 0, 0), UsageError);
}

TEST(SampleEpisode, DeterministicChainFollowsUniquePath) {
    const auto inst = chain_instance(4, 2, 5);
    Policy pi(5, 4, 1);
    Rng rng(3);
    const auto t = sample_episode(inst.true_model(), pi, rng);
    EXPECT_EQ(t.states, (std::vector<int>{0, 1, 2, 3, 3, 3}));
    EXPECT_EQ(t.actions, (std::vector<int>{1, 1, 1, 1, 1}));
}

TEST(SampleEpisode, SameSeedSameTrajectory) {
    const auto inst = generate_instance({5, 3, 6, 3, 9, "dirichlet"});
    Policy pi(6, 5);
    for (std::size_t i = 0; i < pi.act.size(); ++i) pi.act[i] = static_cast<int>(i % 3);
    Rng a(42), b(42);
    for (int k = 0; k < 20; ++k) EXPECT_EQ(sample_episode(inst.true_model(), pi, a, k), sample_episode(inst.true_model(), pi, b, k));
}

TEST(SampleEpisode, FrequenciesMatchKernel) {
    Mat P1(4, 2), P2(4, 2);
    P1 << 0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8;
    P2 << 0.6, 0.4, 0.1, 0.9, 0.0, 1.0, 0.7, 0.3;
    Vec th(2);
    th << 0.4, 0.6;
    th *= std::sqrt(2.0);
    Vec init(2);
    init << 0.5, 0.5;
    const MixtureInstance inst(2, 2, 1, {P1, P2}, {th}, init);
    Policy pi(1, 2);
    pi(0, 0) = 1;
    pi(0, 1) = 0;
    Rng rng(5);
    const int n = 100000;
    Mat count = Mat::Zero(2, 2);
    Vec visits = Vec::Zero(2);
    for (int k = 0; k < n; ++k) {
        const auto t = sample_episode(inst.true_model(), pi, rng);
        visits[t.states[0]] += 1;
        count(t.states[0], t.states[1]) += 1;
    }
    for (int s = 0; s < 2; ++s) {
        const auto p = inst.transition(th, s, pi(0, s)).p;
        for (int n2 = 0; n2 < 2; ++n2) {
            const double sd = std::sqrt(p[n2] * (1 - p[n2]) / visits[s]);
            EXPECT_NEAR(count(s, n2) / visits[s], p[n2], 3 * sd);
        }
    }
}

TEST(SampleEpisode, InvalidRowsRaiseSamplingError) {
    auto inst = hand_instance();
    auto m = inst.model_from({Vec::Constant(2, 0.5), Vec::Constant(2, 0.5)});
    Rng rng(1);
    EXPECT_THROW(sample_episode(m, Policy(2, 3), rng), SamplingError);
    EXPECT_THROW(sample_episode(inst.true_model(), Policy(2, 3, 5), rng), UsageError);
}

TEST(EvaluatePolicy, SingleStepUnitReward) {
    const auto inst = hand_instance(1);
    const Reward R(1, 3, 2, 1.0);
    for (int a = 0; a < 2; ++a) {
        const auto v = evaluate_policy(inst.true_model(), R, Policy(1, 3, a));
        EXPECT_DOUBLE_EQ(v.start_value, 1.0);
        for (int s = 0; s < 3; ++s) EXPECT_DOUBLE_EQ(v.V[0][s], 1.0);
    }
}

TEST(EvaluatePolicy, ZeroReward) {
    const auto inst = generate_instance({4, 2, 3, 2, 1, "dirichlet"});
    EXPECT_EQ(evaluate_policy(inst.true_model(), Reward(3, 4, 2), Policy(3, 4, 1)).start_value, 0.0);
}

TEST(EvaluatePolicy, MatchesPathEnumeration) {
    Mat P1(4, 2), P2(4, 2);
    P1 << 0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8;
    P2 << 0.6, 0.4, 0.1, 0.9, 0.0, 1.0, 0.7, 0.3;
    std::vector<Vec> th{Vec::Constant(2, std::sqrt(2.0) / 2), Vec::Unit(2, 1) * std::sqrt(2.0)};
    Vec init(2);
    init << 0.25, 0.75;
    const MixtureInstance inst(2, 2, 2, {P1, P2}, th, init);
    const auto& m = inst.true_model();
    Reward R(2, 2, 2);
    Rng rng(2);
    for (auto& r : R.r) r = uniform01(rng);
    Policy pi(2, 2);
    pi(0, 0) = 1;
    pi(0, 1) = 0;
    pi(1, 0) = 0;
    pi(1, 1) = 1;
    // Paths (s1, s2, s3): the last state carries no reward.
    double expected = 0.0;
    for (int s1 = 0; s1 < 2; ++s1)
        for (int s2 = 0; s2 < 2; ++s2)
            for (int s3 = 0; s3 < 2; ++s3) {
                const int a1 = pi(0, s1), a2 = pi(1, s2);
                const double p = init[s1] * m.prob(0, s1, a1, s2) * m.prob(1, s2, a2, s3);
                expected += p * (R(0, s1, a1) + R(1, s2, a2));
            }
    EXPECT_NEAR(evaluate_policy(m, R, pi).start_value, expected, 1e-14);
}

TEST(EvaluatePolicy, ValuesWithinRemainingHorizon) {
    const auto inst = generate_instance({5, 2, 4, 3, 2, "hetero"});
    Rng rng(4);
    const Reward R = random_reward(4, 5, 2, rng);
    const auto v = evaluate_policy(inst.true_model(), R, Policy(4, 5, 1));
    for (int h = 0; h <= 4; ++h) {
        EXPECT_GE(v.V[h].minCoeff(), 0.0);
        EXPECT_LE(v.V[h].maxCoeff(), 4 - h + 1e-12);
    }
}

TEST(OptimalPolicyDP, SingleActionReturnsThatPolicy) {
    const auto inst = generate_instance({4, 1, 3, 2, 8, "dirichlet"});
    Rng rng(1);
    const Reward R = random_reward(3, 4, 1, rng);
    const auto plan = optimal_policy_dp(inst.true_model(), R);
    EXPECT_EQ(plan.policy, Policy(3, 4, 0));
    EXPECT_NEAR(plan.start_value, evaluate_policy(inst.true_model(), R, plan.policy).start_value, 1e-15);
}

TEST(OptimalPolicyDP, ActionIrrelevantRewardTiesToLowestIndex) {
    // Single kernel with identical rows for both actions.
    Mat P(6, 3);
    P << 0.2, 0.3, 0.5, 0.2, 0.3, 0.5, 0.6, 0.4, 0.0, 0.6, 0.4, 0.0, 0.1, 0.1, 0.8, 0.1, 0.1, 0.8;
    const MixtureInstance inst(3, 2, 3, {P}, std::vector<Vec>(3, Vec::Ones(1)), Vec::Unit(3, 0));
    Reward R(3, 3, 2);
    for (int h = 0; h < 3; ++h)
        for (int s = 0; s < 3; ++s) R(h, s, 0) = R(h, s, 1) = 0.1 * (s + h);
    const auto plan = optimal_policy_dp(inst.true_model(), R);
    EXPECT_EQ(plan.policy, Policy(3, 3, 0));
    EXPECT_NEAR(plan.start_value, evaluate_policy(inst.true_model(), R, Policy(3, 3, 1)).start_value, 1e-14);
}

TEST(OptimalPolicyDP, MatchesEnumerationOnRandomInstances) {
    Rng rng(17);
    for (int i = 0; i < 100; ++i) {
        const InstanceSpec sp{3, 2, 3, 1 + i % 3, static_cast<std::uint64_t>(i), i % 2 ? "hetero" : "dirichlet"};
        const auto inst = generate_instance(sp);
        const Reward R = random_reward(3, 3, 2, rng);
        const double dp = optimal_policy_dp(inst.true_model(), R).start_value;
        const double oracle = enumerate_policies_oracle(inst.true_model(), R);
        EXPECT_LE(std::abs(dp - oracle), 1e-12 * std::max(1.0, std::abs(oracle))) << i;
    }
}

TEST(EnumerationOracle, SinglePolicySpace) {
    const auto inst = generate_instance({3, 1, 2, 2, 5, "dirichlet"});
    Rng rng(3);
    const Reward R = random_reward(2, 3, 1, rng);
    EXPECT_DOUBLE_EQ(enumerate_policies_oracle(inst.true_model(), R),
                     evaluate_policy(inst.true_model(), R, Policy(2, 3, 0)).start_value);
}

TEST(EnumerationOracle, EmptyHorizonIsZero) {
    const MixtureInstance inst(2, 2, 0, {Mat::Constant(4, 2, 0.5)}, {}, Vec::Unit(2, 0));
    EXPECT_EQ(enumerate_policies_oracle(inst.true_model(), Reward(0, 2, 2)), 0.0);
}

TEST(EnumerationOracle, GuardRefuses) {
    const auto inst = generate_instance({7, 3, 3, 2, 1, "dirichlet"});  // 3^21 policies
    EXPECT_THROW(enumerate_policies_oracle(inst.true_model(), Reward(3, 7, 3)), UsageError);
}

TEST(ValidateModel, TruthPasses) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto inst = generate_instance({5, 2, 4, 3, seed, "needle"});
        const auto rep = validate_model(inst, inst.theta);
        EXPECT_TRUE(rep.pass);
        EXPECT_LE(rep.max_residual(), 1e-12);
    }
}

TEST(ValidateModel, ShortSimplexFails) {
    const auto inst = generate_instance({4, 2, 2, 3, 0, "dirichlet"});
    // Raw coordinates summing to 0.9, converted to the scaled view.
    Vec raw(3);
    raw << 0.3, 0.3, 0.3;
    const auto rep = validate_model(inst, {inst.scaled_view(raw), inst.scaled_view(raw)});
    EXPECT_FALSE(rep.pass);
    EXPECT_NEAR(rep.row_sum_residual, 0.1, 1e-12);
}

TEST(ValidateModel, ProjectedOutputPasses) {
    const auto inst = generate_instance({5, 2, 3, 3, 2, "dirichlet"});
    Rng rng(9);
    std::vector<Vec> raw;
    std::vector<CovarianceAccumulator> acc(3, CovarianceAccumulator(3, 1.0 / 3.0));
    for (int h = 0; h < 3; ++h) {
        Vec x(3);
        for (auto& v : x) v = 3 * standard_normal(rng);
        raw.push_back(x);
        for (int t = 0; t < 10; ++t) {
            Vec z(3);
            for (auto& v : z) v = standard_normal(rng);
            acc[h].update(z, 0.0);
        }
    }
    EXPECT_FALSE(validate_model(inst, raw).pass);
    for (auto param : {Parameterization::BasisSimplex, Parameterization::GeneralFinite}) {
        const auto m = project_to_valid_model(inst, raw, acc, 1.0, param);
        EXPECT_TRUE(validate_model(inst, m.theta).pass) << to_string(param);
    }
}

TEST(GenerateInstance, SingleComponentIsTruth) {
    const auto inst = generate_instance({4, 2, 3, 1, 6, "dirichlet"});
    for (const auto& th : inst.theta) EXPECT_NEAR(th[0], 1.0, 1e-15);
    for (int h = 0; h < 3; ++h) EXPECT_LE((inst.true_model().P[h] - inst.basis[0]).lpNorm<Eigen::Infinity>(), 1e-15);
}

TEST(GenerateInstance, BitIdenticalPerSeed) {
    for (const char* fam : {"dirichlet", "needle", "hetero"}) {
        const auto a = generate_instance({5, 3, 4, 3, 77, fam});
        const auto b = generate_instance({5, 3, 4, 3, 77, fam});
        for (int i = 0; i < 3; ++i) EXPECT_EQ(a.basis[i], b.basis[i]);
        for (int h = 0; h < 4; ++h) EXPECT_EQ(a.theta[h], b.theta[h]);
        EXPECT_EQ(a.init, b.init);
    }
}

TEST(GenerateInstance, InvariantSweep) {
    const char* fams[] = {"dirichlet", "needle", "hetero"};
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const InstanceSpec sp{2 + static_cast<int>(seed % 5), 1 + static_cast<int>(seed % 3), 1 + static_cast<int>(seed % 4),
                              1 + static_cast<int>(seed % 4), seed, fams[seed % 3]};
        const auto inst = generate_instance(sp);
        ASSERT_TRUE(validate_model(inst, inst.theta).pass) << seed;
        for (const auto& P : inst.basis) {
            ASSERT_GE(P.minCoeff(), 0.0);
            ASSERT_LE((P.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
        }
        for (const auto& th : inst.theta) ASSERT_LE(th.norm(), inst.bound() + 1e-12);
        double worst = 0.0;
        for (int mask = 0; mask < (1 << inst.S); ++mask) {
            Vec V(inst.S);
            for (int s = 0; s < inst.S; ++s) V[s] = (mask >> s) & 1;
            for (int s = 0; s < inst.S; ++s)
                for (int a = 0; a < inst.A; ++a) worst = std::max(worst, inst.phi_V(s, a, V).norm());
        }
        ASSERT_LE(worst, 1.0 + 1e-9) << seed;
    }
}

TEST(GenerateInstance, RejectsUnknownFamilyAndBadSizes) {
    EXPECT_THROW(generate_instance({3, 2, 2, 2, 0, "lower-bound"}), UsageError);
    EXPECT_THROW(generate_instance({0, 2, 2, 2, 0, "dirichlet"}), UsageError);
}

TEST(EvaluatePolicy, MatchesMonteCarlo) {
    const auto inst = generate_instance({3, 2, 3, 2, 12, "dirichlet"});
    Rng rng(21);
    const Reward R = random_reward(3, 3, 2, rng);
    Policy pi(3, 3);
    for (auto& a : pi.act) a = uniform_int(rng, 2);
    const double exact = evaluate_policy(inst.true_model(), R, pi).start_value;
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int k = 0; k < n; ++k) {
        const auto t = sample_episode(inst.true_model(), pi, rng);
        double g = 0.0;
        for (int h = 0; h < 3; ++h) g += R(h, t.states[h], t.actions[h]);
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n, se = std::sqrt((sq / n - mean * mean) / n);
    EXPECT_NEAR(mean, exact, 3 * se);
}
