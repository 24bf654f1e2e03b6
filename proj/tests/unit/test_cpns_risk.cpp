// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/cpns_risk.hpp"
#include "cpns/errors.hpp"
#include "op_cases.hpp"

#include <gtest/gtest.h>

#include <array>
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

CpnsReport enumerate(std::span<const SampleOutcome> intra, std::span<const SampleOutcome> inter) {
    auto one = [](std::span<const SampleOutcome> v, double& r, double& m, double& pns) {
        double suff = 0, nec = 0, both = 0, fc = 0, cc = 0;
        for (const auto& o : v) {
            const bool s = !o.factual_correct;
            const bool n = o.counterfactual_correct || o.degenerate;
            suff += s;
            nec += n;
            both += s && n;
            fc += o.factual_correct;
            cc += o.counterfactual_correct;
        }
        const double size = v.empty() ? 1.0 : static_cast<double>(v.size());
        r = (suff + nec) / size;
        m = both / size;
        pns = (fc - cc) / size;
    };
    CpnsReport rep;
    one(intra, rep.r_intra, rep.m_intra, rep.pns_intra_est);
    one(inter, rep.r_inter, rep.m_inter, rep.pns_inter_est);
    rep.r_total = rep.r_intra + rep.r_inter;
    rep.m_total = rep.m_intra + rep.m_inter;
    return rep;
}

std::vector<SampleOutcome> all_eight() {
    std::vector<SampleOutcome> out;
    for (int bits = 0; bits < 8; ++bits) {
        out.push_back({(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0});
    }
    return out;
}

TEST(Aggregate, EightSampleEnumeration) {
    const auto eight = all_eight();
    // Hand count: suff = 4, nec = cf || degenerate = 6, both = 3.
    const CpnsReport r = aggregate_outcomes(eight, {});
    EXPECT_DOUBLE_EQ(r.r_intra, 10.0 / 8.0);
    EXPECT_DOUBLE_EQ(r.m_intra, 3.0 / 8.0);
    EXPECT_DOUBLE_EQ(r.pns_intra_est, 0.0);
    const CpnsReport oracle = enumerate(eight, {});
    EXPECT_DOUBLE_EQ(r.r_intra, oracle.r_intra);
    EXPECT_DOUBLE_EQ(r.m_intra, oracle.m_intra);
    for (const auto& o : eight) {
        EXPECT_LE(o.sufficiency_violation() && o.necessity_violation(),
                  int(o.sufficiency_violation()) + int(o.necessity_violation()));
    }
}

TEST(Aggregate, RandomBatchesMatchEnumeration) {
    Rng rng(1);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SampleOutcome> a(testing::random_dim(rng, 1, 12));
        std::vector<SampleOutcome> b(testing::random_dim(rng, 0, 12));
        for (auto* v : {&a, &b}) {
            for (auto& o : *v) {
                o = {coin(rng), coin(rng), coin(rng)};
            }
        }
        const CpnsReport r = aggregate_outcomes(a, b);
        const CpnsReport e = enumerate(a, b);
        EXPECT_NEAR(r.r_total, e.r_total, 1e-15);
        EXPECT_NEAR(r.m_total, e.m_total, 1e-15);
        EXPECT_NEAR(r.pns_inter_est, e.pns_inter_est, 1e-15);
        EXPECT_TRUE(check_proposition1(r));
    }
}

TEST(IntraRisk, PerfectClassifierWithFlippingCounterfactuals) {
    const LinearHead head = hand_head();
    CounterfactualConfig cf;
    cf.alpha = 10.0;
    cf.epsilon = 1e9;
    std::vector<IntraPoint> pts = {{{0.1, 0.0}, 0}, {{0.3, 1.0}, 0}, {{-0.2, 0.0}, 1}, {{-0.1, -2.0}, 1}};
    const CpnsReport r = report_from_points(pts, {}, head, head, cf);
    EXPECT_EQ(r.r_intra, 0.0);
    EXPECT_EQ(r.m_intra, 0.0);
    EXPECT_EQ(r.pns_intra_est, 1.0);
}

TEST(IntraRisk, DegenerateCounterfactualsCountAsNecessityViolations) {
    const LinearHead head = hand_head();
    CounterfactualConfig cf;
    // Logits of +-1000 saturate the softmax, so the CE gradient is exactly 0.
    std::vector<IntraPoint> pts = {{{1000.0, 0.0}, 0}, {{-1000.0, 0.0}, 1}};
    const CpnsReport r = report_from_points(pts, {}, head, head, cf);
    EXPECT_EQ(r.r_intra, 1.0);
    EXPECT_EQ(r.m_intra, 0.0);
    EXPECT_EQ(r.pns_intra_est, 0.0);
}

TEST(IntraRisk, AlwaysWrongFactualRightCounterfactualGivesMOne) {
    std::vector<SampleOutcome> v(5, SampleOutcome{false, true, false});
    const CpnsReport r = aggregate_outcomes(v, {});
    EXPECT_EQ(r.m_intra, 1.0);
    EXPECT_EQ(r.r_intra, 2.0);
}

TEST(Proposition1, NegativeControl) {
    CpnsReport r = aggregate_outcomes(all_eight(), all_eight());
    EXPECT_TRUE(check_proposition1(r));
    EXPECT_NO_THROW(assert_proposition1(r));
    r.m_total = r.r_total + 0.5;
    EXPECT_FALSE(check_proposition1(r));
    EXPECT_THROW(assert_proposition1(r), InvariantViolation);
}

TEST(Proposition1, FuzzedModels) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        ModelConfig mc;
        mc.input_dim = 4;
        mc.hidden = {6};
        mc.feature_dim = 3;
        ExpandableModel model(mc, rng());
        model.expand(3);
        model.expand(2);
        std::vector<Sample> cur;
        std::vector<Sample> buf;
        for (int i = 0; i < 6; ++i) {
            cur.push_back({random_vector(rng, 4), 3 + testing::random_dim(rng, 0, 1)});
            buf.push_back({random_vector(rng, 4), testing::random_dim(rng, 0, 4)});
        }
        CounterfactualConfig cf;
        cf.alpha = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
        cf.beta = std::uniform_real_distribution<double>(0.01, 0.5)(rng);
        cf.epsilon = std::exp(std::uniform_real_distribution<double>(-5.0, 2.0)(rng));
        const CpnsReport r = empirical_cpns_risk(cur, buf, model, cf);
        EXPECT_TRUE(check_proposition1(r));
        EXPECT_LE(r.m_intra, r.r_intra);
        EXPECT_LE(r.m_inter, r.r_inter);
        EXPECT_EQ(r.n_intra, 6u);
        EXPECT_EQ(r.n_inter, 6u);
        const auto [mi, me] = monotonicity_violation(cur, buf, model, cf);
        EXPECT_EQ(mi, r.m_intra);
        EXPECT_EQ(me, r.m_inter);
    }
}

TEST(EmpiricalRisk, ScopeErrors) {
    ModelConfig mc;
    mc.input_dim = 3;
    mc.hidden = {4};
    mc.feature_dim = 2;
    ExpandableModel model(mc, 3);
    model.expand(2);
    const std::vector<Sample> cur = {{{1, 2, 3}, 1}};
    const CounterfactualConfig cf;
    EXPECT_THROW(empirical_cpns_risk({}, {}, model, cf), InputError);
    const CpnsReport first = empirical_cpns_risk(cur, {}, model, cf);
    EXPECT_EQ(first.n_inter, 0u);
    EXPECT_EQ(first.r_inter, 0.0);
    EXPECT_THROW(inter_points(cur, model), UsageError);
    model.expand(2);
    const std::vector<Sample> cur2 = {{{1, 2, 3}, 3}};
    EXPECT_THROW(empirical_cpns_risk(cur2, {}, model, cf), InputError);
    EXPECT_THROW(intra_points(cur, model), InputError);
}

// Binary cause X and effect Y with exogenous response types. PNS is the mass
// of the "helped" type; under monotonicity (no "hurt" type) it equals
// P(y | do(x)) - P(y | do(x')), which is what the accuracy-difference
// estimator computes.
TEST(Pns, TwoVariableScmOracle) {
    // Response types: never, always, helped, hurt. Y_x, Y_x' per type.
    const std::array<std::pair<bool, bool>, 4> response = {{{false, false}, {true, true}, {true, false}, {false, true}}};
    const std::array<std::array<int, 4>, 3> weights = {{{2, 3, 5, 0}, {1, 1, 8, 0}, {0, 4, 4, 0}}};
    for (const auto& w : weights) {
        std::vector<SampleOutcome> outcomes;
        double pns = 0.0;
        double total = 0.0;
        for (std::size_t type = 0; type < 4; ++type) {
            for (int k = 0; k < w[type]; ++k) {
                outcomes.push_back({response[type].first, response[type].second, false});
            }
            total += w[type];
            pns += response[type].first && !response[type].second ? w[type] : 0.0;
        }
        const CpnsReport r = aggregate_outcomes(outcomes, {});
        EXPECT_NEAR(r.pns_intra_est, pns / total, 1e-15);
        EXPECT_EQ(r.m_intra, 0.0);
    }
    // With a "hurt" type the difference underestimates PNS by its mass.
    std::vector<SampleOutcome> outcomes = {{true, false, false}, {true, false, false}, {false, true, false}};
    const CpnsReport r = aggregate_outcomes(outcomes, {});
    EXPECT_NEAR(r.pns_intra_est, 2.0 / 3.0 - 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(r.m_intra, 1.0 / 3.0, 1e-15);
}

TEST(Pns, IdenticalInterventionsGiveZero) {
    ModelConfig mc;
    mc.input_dim = 3;
    mc.hidden = {4};
    mc.feature_dim = 2;
    ExpandableModel model(mc, 4);
    model.expand(3);
    // Zero intra head: every counterfactual is degenerate, hence equal to
    // the factual feature.
    model.intra().weight().values.assign(6, 0.0);
    Rng rng(4);
    std::vector<Sample> eval;
    for (int i = 0; i < 30; ++i) {
        eval.push_back({random_vector(rng, 3), testing::random_dim(rng, 0, 2)});
    }
    EXPECT_EQ(estimate_pns_interventional(eval, model, Scope::Intra, {}), 0.0);
    EXPECT_THROW(estimate_pns_interventional({}, model, Scope::Intra, {}), InputError);
}

TEST(Surrogate, UniformPredictionsClosedForm) {
    Rng rng(5);
    for (std::size_t k : {2u, 3u, 5u, 10u}) {
        LinearHead head(k, 4, rng);
        head.weight().values.assign(head.weight().size(), 0.0);
        head.bias().values.assign(k, 0.0);
        const Vector c = random_vector(rng, 4);
        const Vector cbar = random_vector(rng, 4);
        for (double nu : {0.0, 0.5, 1.0}) {
            const double expected =
                std::log(static_cast<double>(k)) + nu * -std::log(1.0 - 1.0 / static_cast<double>(k) + 1e-12);
            EXPECT_NEAR(surrogate_intra_value(c, cbar, 1, head, nu), expected, 1e-12);
            Graph g;
            const NodeRef loss = surrogate_intra_loss(g, g.input(c), g.input(cbar), 1, head, true, nu);
            EXPECT_NEAR(g.scalar(loss), expected, 1e-12);
        }
    }
}

TEST(Surrogate, ZeroCounterfactualProbabilityGivesZeroNecessity) {
    const LinearHead head = hand_head();
    const Vector c = {0.0, 0.0};
    const Vector cbar = {-1000.0, 0.0};
    const double ce = std::log(2.0);
    EXPECT_NEAR(surrogate_intra_value(c, cbar, 0, head, 1.0), ce, 1e-11);
}

TEST(Surrogate, InterTwoClassHandOracle) {
    ModelConfig mc;
    mc.input_dim = 2;
    mc.hidden = {2};
    mc.feature_dim = 1;
    ExpandableModel model(mc, 6);
    EXPECT_THROW(model.current_task(), UsageError);
    model.expand(1);
    const Vector z1 = {0.5};
    EXPECT_THROW(surrogate_inter_value(model, z1, z1, 0, 1.0), UsageError);
    model.expand(1);
    model.cls().weight().values = {2.0, -1.0, 0.5, 1.5};
    model.cls().bias().values = {0.1, -0.1};
    const Vector z = {1.0, 2.0};
    const Vector zbar = {1.0, 0.5};
    // logits z: [2 - 2 + 0.1, 0.5 + 3 - 0.1] = [0.1, 3.4]
    // logits zbar: [2 - 0.5 + 0.1, 0.5 + 0.75 - 0.1] = [1.6, 1.15]
    const double ce = std::log(std::exp(0.1) + std::exp(3.4)) - 3.4;
    const double p1bar = std::exp(1.15) / (std::exp(1.6) + std::exp(1.15));
    const double nu = 0.7;
    const double expected = ce + nu * -std::log(1.0 - p1bar + 1e-12);
    EXPECT_NEAR(surrogate_inter_value(model, z, zbar, 1, nu), expected, 1e-12);
    Graph g;
    EXPECT_NEAR(g.scalar(surrogate_inter_loss(g, model, g.input(z), g.input(zbar), 1, false, nu)), expected, 1e-12);

    // Counterfactual block equal to factual: necessity uses the factual
    // probability.
    const double p1 = std::exp(3.4) / (std::exp(0.1) + std::exp(3.4));
    EXPECT_NEAR(surrogate_inter_value(model, z, z, 1, nu), ce + nu * -std::log(1.0 - p1 + 1e-12), 1e-12);
}

TEST(Surrogate, GradientsMatchFiniteDifferences) {
    Rng rng(7);
    for (int i = 0; i < 30; ++i) {
        EXPECT_LT(testing::case_surrogate_intra(rng), 1e-4);
        EXPECT_LT(testing::case_surrogate_inter(rng), 1e-4);
    }
}

TEST(Report, JsonFieldNames) {
    const CpnsReport r = aggregate_outcomes(all_eight(), all_eight());
    const nlohmann::json j = r;
    for (const char* key : {"r_intra", "r_inter", "r_total", "m_intra", "m_inter", "m_total", "pns_intra_est",
                            "pns_inter_est", "n_intra", "n_inter"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j.size(), 10u);
    const CpnsReport back = j.get<CpnsReport>();
    EXPECT_EQ(back.r_total, r.r_total);
    EXPECT_EQ(back.n_inter, r.n_inter);
}

} // namespace
} // namespace cpns
