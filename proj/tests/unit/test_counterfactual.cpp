// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/counterfactual.hpp"
#include "cpns/errors.hpp"
#include "op_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace cpns {
namespace {

using testing::random_vector;

LinearHead hand_head() {
    Rng rng(0);
    LinearHead h(2, 2, rng);
    h.weight().values = {1.0, 0.0, -1.0, 0.0};
    h.bias().values = {0.0, 0.0};
    return h;
}

TEST(GenIntra, HandComputedTwoClassCase) {
    const LinearHead head = hand_head();
    const Vector c = {1.0, 0.0};
    // logits [1, -1]; p1 = 1 / (1 + e^2); grad = W^T (p - e0) = [-2 p1, 0].
    const double p1 = 1.0 / (1.0 + std::exp(2.0));
    const Vector g = intra_loss_gradient(c, 0, head);
    EXPECT_NEAR(g[0], -2.0 * p1, 1e-15);
    EXPECT_EQ(g[1], 0.0);

    const auto s = gen_intra(c, 0, head, 1.0, 1e9);
    EXPECT_FALSE(s.degenerate);
    EXPECT_EQ(s.applied_scale, 1.0);
    EXPECT_NEAR(s.counterfactual[0], 1.0 - 2.0 * p1, 1e-15);
    EXPECT_LT(s.delta[0], 0.0);
    EXPECT_EQ(s.counterfactual[1], 0.0);
}

TEST(GenIntra, ZeroGradientIsDegenerate) {
    Rng rng(1);
    LinearHead head(3, 4, rng);
    head.weight().values.assign(head.weight().size(), 0.0);
    const Vector c = {0.5, 1.0, -1.0, 2.0};
    const auto s = gen_intra(c, 1, head, 1.0, 0.05);
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.counterfactual, c);
    EXPECT_EQ(s.applied_scale, 0.0);
}

TEST(GenIntra, BacktrackingHalvesTheStep) {
    Rng rng(2);
    LinearHead head(4, 6, rng);
    const Vector c = random_vector(rng, 6);
    const auto s = gen_intra(c, 2, head, 64.0, 1e-3);
    ASSERT_FALSE(s.degenerate);
    const double halvings = std::log2(64.0 / s.applied_scale);
    EXPECT_NEAR(halvings, std::round(halvings), 1e-12);
    EXPECT_LE(s.kl_value, 1e-3);
}

TEST(GenIntra, BadConfigRejected) {
    const LinearHead head = hand_head();
    const Vector c = {1.0, 0.0};
    EXPECT_THROW(gen_intra(c, 0, head, 0.0, 0.05), ConfigError);
    EXPECT_THROW(gen_intra(c, 0, head, 1.0, -1.0), ConfigError);
}

TEST(Generators, ConstraintHoldsOnRandomTrials) {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = testing::random_dim(rng, 2, 8);
        const std::size_t k = testing::random_dim(rng, 2, 5);
        LinearHead head(k, d, rng);
        const Vector c = random_vector(rng, d, 2.0);
        const Vector p = random_vector(rng, d, 2.0);
        const double eps = std::exp(std::uniform_real_distribution<double>(-6.0, 0.0)(rng));
        const auto a = gen_intra(c, trial % k, head, 5.0, eps);
        const auto b = gen_inter(c, p, 0.2, eps);
        const auto r = perturb_random(c, eps, rng);
        const auto q = perturb_pgd(c, trial % k, head, 5, 1.0, eps);
        for (const auto* s : {&a, &b, &r, &q}) {
            EXPECT_TRUE(s->degenerate || s->kl_value <= eps);
            if (!s->degenerate) {
                EXPECT_LE(divergence(Divergence::Kl, s->counterfactual, s->factual), eps);
            }
        }
    }
}

TEST(GenInter, ClosedForm) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const Vector c = random_vector(rng, 7);
        const Vector p = random_vector(rng, 7);
        const auto s = gen_inter(c, p, 0.03, 1e9);
        ASSERT_FALSE(s.degenerate);
        EXPECT_EQ(s.applied_scale, 0.03);
        EXPECT_EQ(s.reference, p);
        for (std::size_t i = 0; i < c.size(); ++i) {
            EXPECT_NEAR(s.counterfactual[i], 0.94 * c[i] + 0.06 * p[i], 1e-12);
        }
    }
}

TEST(GenInter, QuarterStepIsMidpoint) {
    const Vector c = {1.0, -2.0, 0.5};
    const Vector p = {3.0, 0.0, -0.5};
    const auto s = gen_inter(c, p, 0.25, 1e9);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_NEAR(s.counterfactual[i], 0.5 * (c[i] + p[i]), 1e-12);
    }
}

TEST(GenInter, ClosedFormAfterBacktracking) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const Vector c = random_vector(rng, 5, 3.0);
        const Vector p = random_vector(rng, 5, 3.0);
        const auto s = gen_inter(c, p, 0.4, 0.01);
        if (s.degenerate) {
            continue;
        }
        const double b = s.applied_scale;
        for (std::size_t i = 0; i < c.size(); ++i) {
            EXPECT_NEAR(s.counterfactual[i], (1.0 - 2.0 * b) * c[i] + 2.0 * b * p[i], 1e-12);
        }
    }
}

TEST(GenInter, FactualEqualToProjectionIsDegenerate) {
    const Vector c = {0.3, 0.7};
    const auto s = gen_inter(c, c, 0.03, 0.05);
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.counterfactual, c);
}

TEST(GenInter, RejectsBadInput) {
    const Vector c = {0.3, 0.7};
    const Vector p = {0.3};
    EXPECT_THROW(gen_inter(c, p, 0.03, 0.05), InputError);
    EXPECT_THROW(gen_inter(c, c, 0.0, 0.05), ConfigError);
    GeneratorOptions opts;
    opts.space = ConstraintSpace::Predictive;
    EXPECT_THROW(gen_inter(c, Vector{1.0, 1.0}, 0.03, 0.05, opts), ConfigError);
}

TEST(PerturbRandom, ShrinksToFactualAsBudgetVanishes) {
    Rng rng(6);
    const Vector c = random_vector(rng, 6);
    double previous = INFINITY;
    for (double budget : {1e-1, 1e-3, 1e-5, 1e-7}) {
        const auto s = perturb_random(c, budget, rng);
        ASSERT_FALSE(s.degenerate);
        const double moved = kernels::norm(s.delta);
        EXPECT_LT(moved, previous);
        previous = moved;
    }
    EXPECT_LT(previous, 1e-2);
}

TEST(PerturbRandom, SeedDeterministic) {
    const Vector c = {0.1, 0.2, 0.3, 0.4};
    Rng a(7);
    Rng b(7);
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(perturb_random(c, 0.05, a).applied_scale, perturb_random(c, 0.05, b).applied_scale);
    }
}

TEST(PerturbPgd, SingleStepFollowsTheIntraGradient) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        LinearHead head(3, 5, rng);
        const Vector c = random_vector(rng, 5);
        const auto intra = gen_intra(c, 1, head, 1.0, 0.05);
        const auto pgd = perturb_pgd(c, 1, head, 1, 1.0, 0.05);
        if (intra.degenerate || pgd.degenerate) {
            continue;
        }
        // Same direction; only the step-shrinking schedule differs.
        EXPECT_NEAR(kernels::cosine(intra.delta, pgd.delta), 1.0, 1e-9);
        EXPECT_LE(pgd.kl_value, 0.05);
    }
}

TEST(PerturbPgd, StepsMustBePositive) {
    const LinearHead head = hand_head();
    const Vector c = {1.0, 0.0};
    EXPECT_THROW(perturb_pgd(c, 0, head, 0, 1.0, 0.05), ConfigError);
}

TEST(Divergence, AllKindsVanishAtEquality) {
    const Vector a = {0.2, -1.0, 3.0};
    for (auto kind : {Divergence::Kl, Divergence::Mse, Divergence::Wasserstein, Divergence::CrossEntropy}) {
        EXPECT_NEAR(divergence(kind, a, a), 0.0, 1e-15) << to_string(kind);
        EXPECT_EQ(parse_divergence(to_string(kind)), kind);
    }
    EXPECT_THROW(parse_divergence("hellinger"), ConfigError);
}

TEST(Divergence, KlShiftInvariantAndMatchesDirectSum) {
    const Vector a = {1.0, 0.0};
    const Vector b = {0.0, 1.0};
    const Vector shifted = {4.0, 3.0};
    EXPECT_NEAR(divergence(Divergence::Kl, shifted, a), 0.0, 1e-15);
    const double e = std::exp(1.0);
    const double p0 = e / (e + 1.0);
    const double p1 = 1.0 / (e + 1.0);
    const double direct = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
    EXPECT_NEAR(divergence(Divergence::Kl, a, b), direct, 1e-15);
    // Reverse direction for the cross-entropy variant.
    const Vector c = {0.5, 2.0};
    EXPECT_NEAR(divergence(Divergence::CrossEntropy, a, c), divergence(Divergence::Kl, c, a), 1e-15);
}

TEST(Divergence, NodeMatchesValue) {
    Rng rng(9);
    const Vector a = random_vector(rng, 5);
    const Vector b = random_vector(rng, 5);
    for (auto kind : {Divergence::Kl, Divergence::Mse, Divergence::Wasserstein, Divergence::CrossEntropy}) {
        Graph g;
        EXPECT_NEAR(g.scalar(divergence_node(g, kind, g.input(a), g.input(b))), divergence(kind, a, b), 1e-12);
    }
}

} // namespace
} // namespace cpns
