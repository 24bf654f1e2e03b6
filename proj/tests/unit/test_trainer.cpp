// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/errors.hpp"
#include "cpns/trainer.hpp"
#include "fixtures.hpp"
#include "op_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

namespace cpns {
namespace {

using testing::fast_train;
using testing::random_vector;
using testing::tiny_model;
using testing::tiny_scm;

std::map<std::string, Vector> snapshot(const ExpandableModel& m) {
    std::map<std::string, Vector> out;
    for (const auto& [name, t] : m.named_tensors()) {
        out[name] = t->values;
    }
    return out;
}

// ----------------------------------------------------------------- optimizer

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
    for (auto kind : {OptimizerKind::SgdMomentum, OptimizerKind::Adam}) {
        Tensor t = Tensor::zeros({3});
        t.values = {1.0, -2.0, 0.5};
        OptimizerConfig oc;
        oc.kind = kind;
        oc.weight_decay = 0.0;
        OptimizerState st;
        for (int i = 0; i < 5; ++i) {
            optimizer_step({{"t", &t}}, st, oc, 0.1);
        }
        EXPECT_EQ(t.values, (Vector{1.0, -2.0, 0.5})) << to_string(kind);
    }
}

TEST(Optimizer, SingleSgdStep) {
    Tensor t = Tensor::zeros({2});
    t.values = {1.0, 2.0};
    t.grad = {0.5, -1.0};
    OptimizerConfig oc;
    oc.kind = OptimizerKind::SgdMomentum;
    oc.weight_decay = 0.0;
    OptimizerState st;
    optimizer_step({{"t", &t}}, st, oc, 0.1);
    EXPECT_DOUBLE_EQ(t.values[0], 1.0 - 0.1 * 0.5);
    EXPECT_DOUBLE_EQ(t.values[1], 2.0 + 0.1 * 1.0);
    // Second step with the same gradient: velocity = momentum * g + g.
    optimizer_step({{"t", &t}}, st, oc, 0.1);
    EXPECT_DOUBLE_EQ(t.values[0], 1.0 - 0.1 * 0.5 - 0.1 * (0.95 * 0.5 + 0.5));
}

TEST(Optimizer, AdamFirstStepBiasCorrection) {
    Tensor t = Tensor::zeros({3});
    t.values = {1.0, 1.0, 1.0};
    t.grad = {0.3, -4.0, 1e-3};
    OptimizerConfig oc;
    oc.weight_decay = 0.0;
    OptimizerState st;
    optimizer_step({{"t", &t}}, st, oc, 0.01);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for (std::size_t i = 0; i < 3; ++i) {
        const double g = t.grad[i];
        EXPECT_NEAR(t.values[i], 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Optimizer, DecoupledWeightDecay) {
    Tensor t = Tensor::zeros({1});
    t.values = {2.0};
    OptimizerConfig oc;
    oc.weight_decay = 0.1;
    OptimizerState st;
    optimizer_step({{"t", &t}}, st, oc, 0.5);
    EXPECT_DOUBLE_EQ(t.values[0], 2.0 - 0.5 * 0.1 * 2.0);
}

TEST(Optimizer, NonFiniteGradientIsNumericError) {
    Tensor t = Tensor::zeros({2});
    t.grad = {0.0, std::numeric_limits<double>::quiet_NaN()};
    OptimizerState st;
    EXPECT_THROW(optimizer_step({{"t", &t}}, st, OptimizerConfig{}, 0.1), NumericError);
    t.grad = {std::numeric_limits<double>::infinity(), 0.0};
    EXPECT_THROW(optimizer_step({{"t", &t}}, st, OptimizerConfig{}, 0.1), NumericError);
}

// -------------------------------------------------------------------- buffer

TEST(Buffer, QuotasForPaperMemory) {
    const auto q = class_quotas(2000, 20);
    ASSERT_EQ(q.size(), 20u);
    for (std::size_t v : q) {
        EXPECT_EQ(v, 100u);
    }
    EXPECT_EQ(class_quotas(10, 4), (std::vector<std::size_t>{3, 3, 2, 2}));
    EXPECT_THROW(class_quotas(3, 4), ConfigError);
}

// Exhaustive greedy: at each step try every unused sample, recompute the
// candidate exemplar mean from scratch, keep the first minimiser.
std::vector<std::size_t> greedy_oracle(const std::vector<Vector>& f, std::size_t count) {
    const std::size_t n = f.size();
    const std::size_t d = f[0].size();
    Vector mu(d, 0.0);
    for (const auto& v : f) {
        for (std::size_t k = 0; k < d; ++k) {
            mu[k] += v[k] / static_cast<double>(n);
        }
    }
    std::vector<std::size_t> chosen;
    for (std::size_t step = 0; step < count; ++step) {
        std::size_t best = n;
        double best_dist = INFINITY;
        for (std::size_t i = 0; i < n; ++i) {
            if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) {
                continue;
            }
            std::vector<std::size_t> trial = chosen;
            trial.push_back(i);
            double dist = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                double m = 0.0;
                for (std::size_t j : trial) {
                    m += f[j][k];
                }
                m /= static_cast<double>(trial.size());
                dist += (mu[k] - m) * (mu[k] - m);
            }
            if (dist < best_dist - 1e-15) {
                best_dist = dist;
                best = i;
            }
        }
        chosen.push_back(best);
    }
    return chosen;
}

TEST(Buffer, HerdingMatchesExhaustiveGreedy) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Vector> f;
        for (int i = 0; i < 10; ++i) {
            f.push_back(random_vector(rng, 4));
        }
        EXPECT_EQ(herding_select(f, 10), greedy_oracle(f, 10));
        EXPECT_EQ(herding_select(f, 4), greedy_oracle(f, 4));
    }
}

TEST(Buffer, HerdingOnIdenticalFeatures) {
    const std::vector<Vector> f(6, Vector{0.5, -1.0, 2.0});
    const auto order = herding_select(f, 6);
    EXPECT_EQ(order.size(), 6u);
    // Every prefix mean equals the class mean.
    Vector running(3, 0.0);
    for (std::size_t s = 0; s < order.size(); ++s) {
        double dist = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            running[k] += f[order[s]][k];
            const double diff = running[k] / static_cast<double>(s + 1) - f[0][k];
            dist += diff * diff;
        }
        EXPECT_EQ(dist, 0.0);
    }
}

TEST(Buffer, CommitShrinksOldClassesToAPrefix) {
    const TaskStream s = gen_scm_stream(tiny_scm(2, 3));
    ExpandableModel m(tiny_model(s.input_dim), 2);
    RehearsalBuffer buf(10, BufferPolicy::Herding);
    Rng rng(2);
    m.expand(3);
    buf.commit(s.tasks[0].train, m, rng);
    EXPECT_EQ(buf.size(), 10u);
    EXPECT_EQ(buf.entries().at(0).size(), 4u);
    EXPECT_EQ(buf.entries().at(2).size(), 3u);
    const auto before = buf.entries();
    m.expand(3);
    buf.commit(s.tasks[1].train, m, rng);
    EXPECT_EQ(buf.size(), 10u);
    EXPECT_EQ(buf.class_count(), 6u);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto& now = buf.entries().at(c);
        EXPECT_EQ(now.size(), c < 4 ? 2u : 1u);
        for (std::size_t i = 0; i < now.size(); ++i) {
            EXPECT_EQ(now[i].x, before.at(c)[i].x);
        }
    }
    EXPECT_THROW(buf.commit(s.tasks[1].train, m, rng), InputError);
}

TEST(Buffer, RandomPolicyIsBalancedAndSeeded) {
    const TaskStream s = gen_scm_stream(tiny_scm(3));
    ExpandableModel m(tiny_model(s.input_dim), 3);
    m.expand(3);
    RehearsalBuffer a(9, BufferPolicy::ClassBalancedRandom);
    RehearsalBuffer b(9, BufferPolicy::ClassBalancedRandom);
    Rng ra(4);
    Rng rb(4);
    a.commit(s.tasks[0].train, m, ra);
    b.commit(s.tasks[0].train, m, rb);
    for (const auto& [label, list] : a.entries()) {
        EXPECT_EQ(list.size(), 3u);
        for (std::size_t i = 0; i < list.size(); ++i) {
            EXPECT_EQ(list[i].x, b.entries().at(label)[i].x);
        }
    }
}

// ----------------------------------------------------------------- projector

TEST(Projector, ExactProjectorHasZeroLoss) {
    Rng rng(5);
    Mlp p({4, 6, 3}, false, rng);
    std::vector<Vector> olds;
    std::vector<Vector> targets;
    for (int i = 0; i < 8; ++i) {
        olds.push_back(random_vector(rng, 4));
        targets.push_back(p.forward(olds.back()));
    }
    EXPECT_EQ(projector_loss(p, olds, targets), 0.0);
}

TEST(Projector, FitsALinearRelation) {
    Rng rng(6);
    Mlp p({4, 16, 3}, false, rng);
    Tensor a = testing::random_tensor(rng, {3, 4});
    std::vector<Vector> olds;
    std::vector<Vector> targets;
    for (int i = 0; i < 64; ++i) {
        olds.push_back(random_vector(rng, 4));
        Vector y(3, 0.0);
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t c = 0; c < 4; ++c) {
                y[r] += a.values[r * 4 + c] * olds.back()[c];
            }
        }
        targets.push_back(y);
    }
    NamedParams params;
    for (auto& [name, t] : p.params()) {
        params.emplace_back(name, &t);
    }
    OptimizerConfig oc;
    oc.weight_decay = 0.0;
    OptimizerState st;
    p.params().zero_grad();
    const double initial = projector_loss(p, olds, targets);
    double last = initial;
    for (int step = 0; step < 1500; ++step) {
        p.params().zero_grad();
        last = projector_loss(p, olds, targets);
        optimizer_step(params, st, oc, 1e-2);
    }
    EXPECT_LT(last, 0.02 * initial);
}

TEST(Projector, StepDoesNotTouchTheExtractor) {
    const TaskStream s = gen_scm_stream(tiny_scm(7));
    ExpandableModel m(tiny_model(s.input_dim), 7);
    m.expand(3);
    EXPECT_THROW(projector_step(m, s.tasks[0].train.samples), UsageError);
    m.expand(3);
    m.zero_grad();
    const auto before = snapshot(m);
    const double loss = projector_step(m, s.tasks[1].train.samples);
    EXPECT_GT(loss, 0.0);
    EXPECT_EQ(snapshot(m), before);
    for (const auto& [name, t] : m.current_extractor().net.params()) {
        EXPECT_EQ(t.grad, Vector(t.size(), 0.0)) << name;
    }
    double touched = 0.0;
    for (const auto& [name, t] : m.projector().params()) {
        for (double g : t.grad) {
            touched += std::abs(g);
        }
    }
    EXPECT_GT(touched, 0.0);
}

// ------------------------------------------------------------------ training

struct StreamRun {
    ExpandableModel model;
    std::vector<TrainResult> results;
};

StreamRun run_stream(const TaskStream& s, const TrainConfig& tc, bool baseline, std::uint64_t seed) {
    StreamRun r{ExpandableModel(tiny_model(s.input_dim), seed), {}};
    RehearsalBuffer buf(tc.buffer_capacity, tc.buffer_policy);
    Rng rng(seed + 100);
    for (const Task& task : s.tasks) {
        r.model.expand(task.range.count);
        r.results.push_back(baseline ? train_task_baseline(r.model, task.train, buf, tc, rng)
                                     : train_task(r.model, task.train, buf, tc, rng));
        buf.commit(task.train, r.model, rng);
    }
    return r;
}

TEST(Training, BaselineDegeneracyIsBitIdentical) {
    const TaskStream s = gen_scm_stream(tiny_scm(8, 3));
    TrainConfig tc = fast_train();
    tc.lambda = 0.0;
    tc.gamma = 0.0;
    tc.nu = 0.0;
    tc.stage1_epochs = 0;
    const StreamRun a = run_stream(s, tc, false, 8);
    const StreamRun b = run_stream(s, tc, true, 8);
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
    for (std::size_t t = 0; t < a.results.size(); ++t) {
        ASSERT_EQ(a.results[t].epochs.size(), b.results[t].epochs.size());
        for (std::size_t e = 0; e < a.results[t].epochs.size(); ++e) {
            EXPECT_EQ(a.results[t].epochs[e].loss.cls, b.results[t].epochs[e].loss.cls);
            EXPECT_EQ(a.results[t].epochs[e].loss.aux, b.results[t].epochs[e].loss.aux);
        }
    }
}

TEST(Training, FrozenExtractorsStayBitIdentical) {
    const TaskStream s = gen_scm_stream(tiny_scm(9));
    ExpandableModel m(tiny_model(s.input_dim), 9);
    RehearsalBuffer buf(30, BufferPolicy::Herding);
    Rng rng(9);
    const TrainConfig tc = fast_train();
    m.expand(3);
    train_task(m, s.tasks[0].train, buf, tc, rng);
    buf.commit(s.tasks[0].train, m, rng);
    m.expand(3);
    std::map<std::string, Vector> frozen_before;
    for (const auto& [name, t] : m.extractor(0).net.params()) {
        frozen_before[name] = t.values;
    }
    train_task(m, s.tasks[1].train, buf, tc, rng);
    for (const auto& [name, t] : m.extractor(0).net.params()) {
        EXPECT_EQ(t.values, frozen_before[name]) << name;
    }
}

TEST(Training, StageOrderAndGeneratorCounters) {
    const TaskStream s = gen_scm_stream(tiny_scm(10));
    const TrainConfig tc = fast_train();
    const StreamRun r = run_stream(s, tc, false, 10);
    for (const TrainResult& res : r.results) {
        ASSERT_EQ(res.epochs.size(), 5u);
        for (std::size_t e = 0; e < 5; ++e) {
            EXPECT_EQ(res.epochs[e].stage, e < 2 ? 1 : 2);
        }
        EXPECT_EQ(res.counters.stage1_inter, 0u);
        EXPECT_GT(res.counters.stage1_intra, 0u);
    }
    EXPECT_EQ(r.results[0].counters.stage2_inter, 0u);
    EXPECT_GT(r.results[1].counters.stage2_inter, 0u);
    // Reports hold n_intra = report_samples and, from t = 1, n_inter too.
    EXPECT_EQ(r.results[1].epochs.back().report.n_inter, 16u);
    EXPECT_EQ(r.results[1].epochs.front().report.n_inter, 0u);
}

TEST(Training, DefaultsNeverBreakProposition1) {
    const TaskStream s = gen_scm_stream(tiny_scm(11, 3));
    TrainConfig tc = fast_train();
    tc.lambda = 0.5;
    tc.gamma = 1.0;
    tc.beta = 0.03;
    std::size_t reports = 0;
    ExpandableModel m(tiny_model(s.input_dim), 11);
    RehearsalBuffer buf(tc.buffer_capacity, tc.buffer_policy);
    Rng rng(11);
    for (const Task& task : s.tasks) {
        m.expand(task.range.count);
        EXPECT_NO_THROW(train_task(m, task.train, buf, tc, rng, [&](const EpochMetrics& em) {
            EXPECT_TRUE(check_proposition1(em.report));
            ++reports;
        }));
        buf.commit(task.train, m, rng);
    }
    EXPECT_EQ(reports, 15u);
}

TEST(Training, ConvergesOnSeparableTask) {
    SyntheticScmConfig sc = tiny_scm(12, 1);
    sc.spurious_strength = 0.0;
    sc.noise_sigma = 0.2;
    const TaskStream s = gen_scm_stream(sc);
    TrainConfig tc = fast_train();
    tc.stage2_epochs = 15;
    const StreamRun r = run_stream(s, tc, false, 12);
    const auto& epochs = r.results[0].epochs;
    EXPECT_LT(epochs.back().loss.cls, 0.5 * epochs[tc.stage1_epochs].loss.cls);
    EXPECT_GE(accuracy(r.model, s.tasks[0].train.samples), 0.98);
}

TEST(Training, InterSurrogateDecreases) {
    const TaskStream s = gen_scm_stream(tiny_scm(13));
    TrainConfig tc = fast_train();
    tc.stage2_epochs = 12;
    tc.lr = 2e-3;
    const StreamRun r = run_stream(s, tc, false, 13);
    const auto& epochs = r.results[1].epochs;
    std::size_t steps = 0;
    std::size_t down = 0;
    for (std::size_t e = tc.stage1_epochs + 1; e < epochs.size(); ++e) {
        ++steps;
        down += epochs[e].loss.inter < epochs[e - 1].loss.inter;
    }
    EXPECT_GE(static_cast<double>(down), 0.9 * static_cast<double>(steps));
}

TEST(Training, RunsAreSeedDeterministic) {
    const TaskStream s = gen_scm_stream(tiny_scm(14));
    const StreamRun a = run_stream(s, fast_train(), false, 14);
    const StreamRun b = run_stream(s, fast_train(), false, 14);
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
}

TEST(Training, PreconditionErrors) {
    const TaskStream s = gen_scm_stream(tiny_scm(15));
    ExpandableModel m(tiny_model(s.input_dim), 15);
    RehearsalBuffer buf(30, BufferPolicy::Herding);
    Rng rng(15);
    const TrainConfig tc = fast_train();
    EXPECT_THROW(train_task(m, s.tasks[0].train, buf, tc, rng), UsageError);
    m.expand(3);
    EXPECT_THROW(train_task(m, s.tasks[1].train, buf, tc, rng), InputError);
    train_task(m, s.tasks[0].train, buf, tc, rng);
    m.expand(3);
    EXPECT_THROW(train_task(m, s.tasks[1].train, buf, tc, rng), ConfigError);
    EXPECT_THROW(train_task_baseline(m, s.tasks[1].train, buf, tc, rng), ConfigError);
    TrainConfig bad = tc;
    bad.batch_size = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
    TrainConfig c;
    c.lambda = 0.25;
    c.optimizer = OptimizerKind::SgdMomentum;
    c.divergence = Divergence::Wasserstein;
    const nlohmann::json j = c;
    const TrainConfig back = j.get<TrainConfig>();
    EXPECT_EQ(back.lambda, 0.25);
    EXPECT_EQ(back.optimizer, OptimizerKind::SgdMomentum);
    EXPECT_EQ(back.divergence, Divergence::Wasserstein);
    nlohmann::json bad = j;
    bad["lamda"] = 0.1;
    EXPECT_THROW(bad.get<TrainConfig>(), ConfigError);
}

} // namespace
} // namespace cpns
