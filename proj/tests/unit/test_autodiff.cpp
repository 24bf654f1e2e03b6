// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/autodiff.hpp"
#include "cpns/errors.hpp"
#include "op_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace cpns {
namespace {

using testing::max_gradient_error;

TEST(AutodiffGradcheck, CoreOpsMatchFiniteDifferences) {
    Rng rng(11);
    for (const auto& c : testing::core_op_cases()) {
        double worst = 0.0;
        for (int i = 0; i < 20; ++i) {
            worst = std::max(worst, c.run(rng));
        }
        EXPECT_LT(worst, 1e-4) << c.name;
    }
}

TEST(AutodiffGradcheck, AuxiliaryOps) {
    Rng rng(12);
    for (int i = 0; i < 20; ++i) {
        EXPECT_LT(testing::case_neg_log_complement(rng), 1e-4);
        EXPECT_LT(testing::case_elementwise(rng), 1e-4);
        EXPECT_LT(testing::case_wasserstein(rng), 1e-4);
    }
}

TEST(AutodiffGradcheck, TwoLayerComposite) {
    Rng rng(13);
    Tensor w0 = testing::random_tensor(rng, {5, 3});
    Tensor b0 = testing::random_tensor(rng, {5});
    Tensor w1 = testing::random_tensor(rng, {4, 5});
    Tensor b1 = testing::random_tensor(rng, {4});
    const double err = max_gradient_error({{0.3, -1.2, 0.8}}, {&w0, &b0, &w1, &b1}, [](Graph& g, const auto& r) {
        const NodeRef h = g.relu(g.linear(r[0], r[1], r[2]));
        return g.softmax_cross_entropy(g.linear(h, r[3], r[4]), 2);
    });
    EXPECT_LT(err, 1e-4);
}

TEST(Autodiff, SoftmaxCrossEntropyValue) {
    Graph g;
    const Vector logits = {1.0, 2.0, 3.0};
    const NodeRef ce = g.softmax_cross_entropy(g.input(logits), 0);
    const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 1.0;
    EXPECT_NEAR(g.scalar(ce), expected, 1e-12);
}

TEST(Autodiff, StableForLargeLogits) {
    Graph g;
    const Vector logits = {1000.0, 0.0, -1000.0};
    const NodeRef x = g.input(logits);
    const NodeRef ce = g.softmax_cross_entropy(x, 0);
    g.backward(ce);
    EXPECT_TRUE(std::isfinite(g.scalar(ce)));
    EXPECT_NEAR(g.scalar(ce), 0.0, 1e-12);
    for (double v : g.grad(x)) {
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Autodiff, KlIsZeroAtEquality) {
    Graph g;
    const Vector a = {0.2, -0.4, 1.1};
    EXPECT_NEAR(g.scalar(g.kl_softmax(g.input(a), g.input(a))), 0.0, 1e-15);
}

TEST(Autodiff, BackwardTwiceDoublesGradients) {
    Graph g;
    Tensor w = Tensor::zeros({2, 2});
    w.values = {1.0, 2.0, 3.0, 4.0};
    Tensor b = Tensor::zeros({2});
    const Vector xv = {1.0, -1.0};
    const NodeRef x = g.input(xv);
    const NodeRef y = g.sum(g.linear(x, g.parameter(w), g.parameter(b)));
    g.backward(y);
    const Vector once(g.grad(x).begin(), g.grad(x).end());
    const Vector w_once = w.grad;
    g.backward(y);
    for (std::size_t i = 0; i < once.size(); ++i) {
        EXPECT_DOUBLE_EQ(g.grad(x)[i], 2.0 * once[i]);
    }
    for (std::size_t i = 0; i < w_once.size(); ++i) {
        EXPECT_DOUBLE_EQ(w.grad[i], 2.0 * w_once[i]);
    }
}

TEST(Autodiff, ReluSubgradientAtZeroIsZero) {
    Graph g;
    const Vector xv = {0.0, 1.0, -1.0};
    const NodeRef x = g.input(xv);
    g.backward(g.sum(g.relu(x)));
    EXPECT_EQ(g.grad(x)[0], 0.0);
    EXPECT_EQ(g.grad(x)[1], 1.0);
    EXPECT_EQ(g.grad(x)[2], 0.0);
}

TEST(Autodiff, FrozenAndConstantLeavesGetNoGradient) {
    Graph g;
    Tensor w = Tensor::zeros({1, 2});
    w.values = {1.0, 1.0};
    w.frozen = true;
    Tensor b = Tensor::zeros({1});
    const Vector xv = {2.0, 3.0};
    const NodeRef y = g.sum(g.linear(g.constant(xv), g.parameter(w), g.frozen(b)));
    EXPECT_FALSE(g.requires_grad(y));
    g.backward(y);
    EXPECT_EQ(w.grad, Vector(2, 0.0));
    EXPECT_EQ(b.grad, Vector(1, 0.0));
}

TEST(Autodiff, NonScalarRootIsUsageError) {
    Graph g;
    const Vector xv = {1.0, 2.0};
    EXPECT_THROW(g.backward(g.input(xv)), UsageError);
}

TEST(Autodiff, BadLabelIsInputError) {
    Graph g;
    const Vector xv = {1.0, 2.0};
    const NodeRef x = g.input(xv);
    EXPECT_THROW(g.softmax_cross_entropy(x, 2), InputError);
    EXPECT_THROW(g.neg_log_complement(x, 5), InputError);
}

TEST(Autodiff, ShapeMismatchIsConfigError) {
    Graph g;
    Tensor w = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2});
    const Vector xv = {1.0, 2.0};
    EXPECT_THROW(g.linear(g.input(xv), g.parameter(w), g.parameter(b)), ConfigError);
}

TEST(Autodiff, ForeignNodeIsRejected) {
    Graph a;
    Graph b;
    const Vector xv = {1.0};
    a.input(xv);
    const NodeRef far = a.input(xv);
    EXPECT_THROW(b.relu(far), UsageError);
}

TEST(Autodiff, GradWrtBeforeBackwardFails) {
    Graph g;
    const Vector xv = {1.0};
    const NodeRef x = g.input(xv);
    EXPECT_THROW(g.grad_wrt(x), UsageError);
}

TEST(Autodiff, WassersteinValueMatchesSortedPairs) {
    Graph g;
    const Vector a = {3.0, 1.0, 2.0};
    const Vector b = {0.0, 5.0, 1.0};
    // sorted: (1,2,3) vs (0,1,5) -> (1 + 1 + 2) / 3
    EXPECT_NEAR(g.scalar(g.wasserstein_1d(g.input(a), g.input(b))), 4.0 / 3.0, 1e-15);
}

} // namespace
} // namespace cpns
