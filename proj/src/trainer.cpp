// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/trainer.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace cpns {

// ---------------------------------------------------------------- enums

const char* to_string(OptimizerKind k) {
    switch (k) {
    case OptimizerKind::SgdMomentum: return "sgd_momentum";
    case OptimizerKind::Adam: return "adam";
    }
    return "?";
}

const char* to_string(BufferPolicy p) {
    switch (p) {
    case BufferPolicy::Herding: return "herding";
    case BufferPolicy::ClassBalancedRandom: return "class_balanced_random";
    }
    return "?";
}

const char* to_string(LrSchedule s) {
    switch (s) {
    case LrSchedule::Constant: return "constant";
    case LrSchedule::Cosine: return "cosine";
    }
    return "?";
}

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::SgdMomentum;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer: " + s);
}

BufferPolicy parse_buffer_policy(const std::string& s) {
    if (s == "herding") return BufferPolicy::Herding;
    if (s == "class_balanced_random") return BufferPolicy::ClassBalancedRandom;
    throw ConfigError("unknown buffer policy: " + s);
}

LrSchedule parse_lr_schedule(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "cosine") return LrSchedule::Cosine;
    throw ConfigError("unknown lr schedule: " + s);
}

// --------------------------------------------------------------- config

void TrainConfig::validate() const {
    auto non_negative = [](double v, const char* name) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError(std::string("train.") + name + " must be a finite value >= 0");
        }
    };
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ConfigError(std::string("train.") + name + " must be > 0");
        }
    };
    if (stage1_epochs < 0 || stage2_epochs < 0) {
        throw ConfigError("train: epoch counts must be >= 0");
    }
    if (batch_size == 0) {
        throw ConfigError("train.batch_size must be >= 1");
    }
    non_negative(lr, "lr");
    non_negative(weight_decay, "weight_decay");
    non_negative(lambda, "lambda");
    non_negative(gamma, "gamma");
    non_negative(nu, "nu");
    positive(alpha, "alpha");
    positive(beta, "beta");
    positive(epsilon, "epsilon");
    if (!(momentum >= 0.0 && momentum < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("train: momentum and adam_beta2 must lie in [0, 1)");
    }
    if (buffer_capacity == 0) {
        throw ConfigError("train.buffer_capacity must be >= 1");
    }
    if (report_samples == 0) {
        throw ConfigError("train.report_samples must be >= 1");
    }
}

CounterfactualConfig TrainConfig::counterfactual() const {
    CounterfactualConfig cf;
    cf.alpha = alpha;
    cf.beta = beta;
    cf.epsilon = epsilon;
    cf.generator.divergence = divergence;
    return cf;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"stage1_epochs", c.stage1_epochs},
                       {"stage2_epochs", c.stage2_epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"momentum", c.momentum},
                       {"adam_beta2", c.adam_beta2},
                       {"weight_decay", c.weight_decay},
                       {"optimizer", to_string(c.optimizer)},
                       {"schedule", to_string(c.schedule)},
                       {"lambda", c.lambda},
                       {"gamma", c.gamma},
                       {"beta", c.beta},
                       {"alpha", c.alpha},
                       {"epsilon", c.epsilon},
                       {"nu", c.nu},
                       {"divergence", to_string(c.divergence)},
                       {"kl_backprop", c.kl_backprop},
                       {"intra_scope", c.intra_scope},
                       {"inter_scope", c.inter_scope},
                       {"buffer_capacity", c.buffer_capacity},
                       {"buffer_policy", to_string(c.buffer_policy)},
                       {"seed", c.seed},
                       {"report_samples", c.report_samples},
                       {"record_wall_time", c.record_wall_time}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) {
        throw ConfigError("train config must be an object");
    }
    static const char* const known[] = {"stage1_epochs", "stage2_epochs", "batch_size", "lr", "momentum",
                                        "adam_beta2", "weight_decay", "optimizer", "schedule", "lambda",
                                        "gamma", "beta", "alpha", "epsilon", "nu", "divergence", "kl_backprop",
                                        "intra_scope", "inter_scope", "buffer_capacity", "buffer_policy", "seed",
                                        "report_samples", "record_wall_time"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown train key: " + key);
        }
    }
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    if (j.contains("schedule")) c.schedule = parse_lr_schedule(j.at("schedule").get<std::string>());
    c.lambda = j.value("lambda", c.lambda);
    c.gamma = j.value("gamma", c.gamma);
    c.beta = j.value("beta", c.beta);
    c.alpha = j.value("alpha", c.alpha);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.nu = j.value("nu", c.nu);
    if (j.contains("divergence")) c.divergence = parse_divergence(j.at("divergence").get<std::string>());
    c.kl_backprop = j.value("kl_backprop", c.kl_backprop);
    c.intra_scope = j.value("intra_scope", c.intra_scope);
    c.inter_scope = j.value("inter_scope", c.inter_scope);
    c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
    if (j.contains("buffer_policy")) c.buffer_policy = parse_buffer_policy(j.at("buffer_policy").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.report_samples = j.value("report_samples", c.report_samples);
    c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
}

// ------------------------------------------------------------ optimizer

OptimizerConfig OptimizerConfig::from(const TrainConfig& c) {
    OptimizerConfig o;
    o.kind = c.optimizer;
    o.lr = c.lr;
    o.momentum = c.momentum;
    o.beta2 = c.adam_beta2;
    o.weight_decay = c.weight_decay;
    return o;
}

void optimizer_step(const NamedParams& params, OptimizerState& state, const OptimizerConfig& config, double lr) {
    for (const auto& [name, t] : params) {
        if (t->grad.size() != t->values.size()) {
            throw ConfigError("optimizer: gradient shape mismatch for " + name);
        }
        for (std::size_t i = 0; i < t->grad.size(); ++i) {
            if (!std::isfinite(t->grad[i])) {
                throw NumericError("optimizer: non-finite gradient in " + name + "[" + std::to_string(i) + "]");
            }
        }
    }
    ++state.step;
    const double b1 = config.momentum;
    const double b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (const auto& [name, t] : params) {
        const std::size_t n = t->values.size();
        Vector& m = state.first[name];
        if (m.size() != n) {
            m.assign(n, 0.0);
        }
        if (config.kind == OptimizerKind::SgdMomentum) {
            for (std::size_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + t->grad[i];
                t->values[i] -= lr * m[i] + lr * config.weight_decay * t->values[i];
            }
            continue;
        }
        Vector& v = state.second[name];
        if (v.size() != n) {
            v.assign(n, 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double g = t->grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            t->values[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps) + lr * config.weight_decay * t->values[i];
        }
    }
}

// --------------------------------------------------------------- buffer

RehearsalBuffer::RehearsalBuffer(std::size_t capacity, BufferPolicy policy) : capacity_(capacity), policy_(policy) {
    if (capacity == 0) {
        throw ConfigError("buffer capacity must be >= 1");
    }
}

std::size_t RehearsalBuffer::size() const {
    std::size_t n = 0;
    for (const auto& [label, list] : entries_) {
        n += list.size();
    }
    return n;
}

std::vector<Sample> RehearsalBuffer::samples() const {
    std::vector<Sample> out;
    out.reserve(size());
    for (const auto& [label, list] : entries_) {
        out.insert(out.end(), list.begin(), list.end());
    }
    return out;
}

std::vector<std::size_t> class_quotas(std::size_t capacity, std::size_t classes) {
    if (classes == 0) {
        return {};
    }
    if (capacity < classes) {
        throw ConfigError("buffer capacity " + std::to_string(capacity) + " is below the " +
                          std::to_string(classes) + " classes seen");
    }
    std::vector<std::size_t> q(classes, capacity / classes);
    for (std::size_t i = 0; i < capacity % classes; ++i) {
        ++q[i];
    }
    return q;
}

std::vector<std::size_t> herding_select(std::span<const Vector> features, std::size_t count) {
    const std::size_t n = features.size();
    count = std::min(count, n);
    std::vector<std::size_t> order;
    if (n == 0 || count == 0) {
        return order;
    }
    const std::size_t d = features.front().size();
    Vector mean(d, 0.0);
    for (const Vector& f : features) {
        for (std::size_t k = 0; k < d; ++k) {
            mean[k] += f[k];
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(n);
    }
    Vector running(d, 0.0);
    std::vector<bool> used(n, false);
    for (std::size_t step = 0; step < count; ++step) {
        std::size_t best = n;
        double best_dist = std::numeric_limits<double>::infinity();
        const double denom = static_cast<double>(step + 1);
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) {
                continue;
            }
            double dist = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = mean[k] - (running[k] + features[i][k]) / denom;
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = i;
            }
        }
        used[best] = true;
        order.push_back(best);
        for (std::size_t k = 0; k < d; ++k) {
            running[k] += features[best][k];
        }
    }
    return order;
}

void RehearsalBuffer::commit(const Dataset& task_train, const ExpandableModel& model, Rng& rng) {
    std::map<std::size_t, std::vector<const Sample*>> by_class;
    for (const Sample& s : task_train.samples) {
        if (entries_.contains(s.label)) {
            throw InputError("buffer commit: class " + std::to_string(s.label) + " was already committed");
        }
        by_class[s.label].push_back(&s);
    }
    std::vector<std::size_t> labels;
    for (const auto& [label, list] : entries_) {
        labels.push_back(label);
    }
    for (const auto& [label, list] : by_class) {
        labels.push_back(label);
    }
    std::sort(labels.begin(), labels.end());
    const std::vector<std::size_t> quotas = class_quotas(capacity_, labels.size());

    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::size_t label = labels[i];
        const std::size_t quota = quotas[i];
        auto old = entries_.find(label);
        if (old != entries_.end()) {
            if (old->second.size() > quota) {
                old->second.resize(quota);
            }
            continue;
        }
        const std::vector<const Sample*>& pool = by_class.at(label);
        std::vector<std::size_t> chosen;
        if (policy_ == BufferPolicy::Herding) {
            std::vector<Vector> feats;
            feats.reserve(pool.size());
            for (const Sample* s : pool) {
                Vector f = model.concat_features(s->x);
                const double n = kernels::norm(f);
                if (n > 0.0) {
                    for (double& v : f) {
                        v /= n;
                    }
                }
                feats.push_back(std::move(f));
            }
            chosen = herding_select(feats, quota);
        } else {
            chosen.resize(pool.size());
            std::iota(chosen.begin(), chosen.end(), std::size_t{0});
            std::shuffle(chosen.begin(), chosen.end(), rng);
            chosen.resize(std::min(quota, chosen.size()));
        }
        std::vector<Sample>& dst = entries_[label];
        for (std::size_t idx : chosen) {
            dst.push_back(*pool[idx]);
        }
    }
}

// ------------------------------------------------------------- helpers

void to_json(nlohmann::json& j, const LossTerms& l) {
    j = nlohmann::json{{"cls", l.cls}, {"aux", l.aux}, {"intra", l.intra},
                       {"inter", l.inter}, {"kl", l.kl},   {"proj", l.proj}};
}

void to_json(nlohmann::json& j, const EpochMetrics& m) {
    j = nlohmann::json{{"task", m.task},
                       {"stage", m.stage},
                       {"epoch", m.epoch},
                       {"loss_terms", m.loss},
                       {"cpns_report", m.report},
                       {"wall_ms", m.wall_ms}};
}

double accuracy(const ExpandableModel& model, std::span<const Sample> samples) {
    if (samples.empty()) {
        throw InputError("accuracy over an empty set");
    }
    std::size_t correct = 0;
    for (const Sample& s : samples) {
        if (kernels::argmax(model.forward_concat(s.x)) == s.label) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

double projector_loss(Mlp& projector, std::span<const Vector> old_features, std::span<const Vector> targets) {
    if (old_features.size() != targets.size()) {
        throw InputError("projector loss: feature and target counts differ");
    }
    if (old_features.empty()) {
        return 0.0;
    }
    const double w = 1.0 / static_cast<double>(old_features.size());
    double total = 0.0;
    for (std::size_t i = 0; i < old_features.size(); ++i) {
        Graph g;
        const NodeRef p = projector.forward(g, g.constant(old_features[i]), true);
        const NodeRef diff = g.sub(p, g.constant(targets[i]));
        const NodeRef loss = g.scale(g.sum(g.hadamard(diff, diff)), w);
        total += g.scalar(loss);
        g.backward(loss);
    }
    return total;
}

double projector_step(ExpandableModel& model, std::span<const Sample> batch) {
    if (model.empty() || model.current_task() == 0) {
        throw UsageError("projector_step requires t >= 1");
    }
    std::vector<Vector> olds;
    std::vector<Vector> targets;
    for (const Sample& s : batch) {
        olds.push_back(model.old_features(s.x));
        targets.push_back(model.features(model.current_task(), s.x));
    }
    return projector_loss(model.projector(), olds, targets);
}

namespace {

using Clock = std::chrono::steady_clock;

/// Per-sample cached inputs for one task run.
struct Item {
    const Sample* sample = nullptr;
    Vector old_features;
};

struct Context {
    ExpandableModel& model;
    const TrainConfig& config;
    std::size_t t = 0;
    ClassRange range;
    std::vector<Item> current;
    std::vector<Item> replay;
    CounterfactualConfig cf;
};

Context make_context(ExpandableModel& model, const Dataset& task_train, const RehearsalBuffer& buffer,
                     const TrainConfig& config, std::vector<Sample>& replay_storage) {
    config.validate();
    if (model.empty()) {
        throw UsageError("train_task: model has not been expanded");
    }
    if (task_train.empty()) {
        throw InputError("train_task: empty task data");
    }
    Context ctx{model, config};
    ctx.t = model.current_task();
    ctx.range = model.current_range();
    ctx.cf = config.counterfactual();
    if (ctx.t >= 1 && buffer.empty()) {
        throw ConfigError("train_task: the rehearsal buffer is empty at task " + std::to_string(ctx.t));
    }
    for (const Sample& s : task_train.samples) {
        if (!ctx.range.contains(s.label)) {
            throw InputError("train_task: label " + std::to_string(s.label) + " is outside the current task");
        }
        ctx.current.push_back({&s, model.old_features(s.x)});
    }
    replay_storage = buffer.samples();
    for (const Sample& s : replay_storage) {
        ctx.replay.push_back({&s, model.old_features(s.x)});
    }
    return ctx;
}

NamedParams select_params(ExpandableModel& model, const std::vector<std::string>& prefixes) {
    NamedParams out;
    for (auto& [name, t] : model.named_tensors()) {
        if (t->frozen) {
            continue;
        }
        for (const std::string& p : prefixes) {
            if (name.compare(0, p.size() + 1, p + ".") == 0) {
                out.emplace_back(name, t);
                break;
            }
        }
    }
    return out;
}

void zero_grads(const NamedParams& params) {
    for (const auto& [name, t] : params) {
        t->zero_grad();
    }
}

double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total) {
    if (c.schedule == LrSchedule::Constant || total == 0) {
        return c.lr;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(total);
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

/// Partial Fisher-Yates: the first `k` entries of a random permutation.
std::vector<std::size_t> draw(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    return idx;
}

/// Base expansion objective for one sample: cross-entropy over the unified
/// classifier plus the auxiliary head from t >= 1. Returns the newest
/// feature node and the weighted loss node.
struct BaseGraph {
    NodeRef feature;
    NodeRef z;
    NodeRef loss;
    double cls = 0.0;
    double aux = 0.0;
};

BaseGraph build_base(Graph& g, Context& ctx, const Item& item, double w) {
    ExpandableModel& model = ctx.model;
    BaseGraph b;
    const NodeRef x = g.constant(item.sample->x);
    b.feature = model.current_extractor().net.forward(g, x, true);
    if (ctx.t >= 1) {
        const NodeRef parts[] = {g.constant(item.old_features), b.feature};
        b.z = g.concat(parts);
    } else {
        b.z = b.feature;
    }
    const NodeRef cls = g.softmax_cross_entropy(model.cls().forward(g, b.z, true), item.sample->label);
    b.cls = g.scalar(cls);
    b.loss = g.scale(cls, w);
    if (ctx.t >= 1) {
        const std::size_t label = item.sample->label;
        const std::size_t aux_label = ctx.range.contains(label) ? label - ctx.range.offset : ctx.range.count;
        const NodeRef aux = g.softmax_cross_entropy(model.aux().forward(g, b.feature, true), aux_label);
        b.aux = g.scalar(aux);
        b.loss = g.add(b.loss, g.scale(aux, w));
    }
    return b;
}

std::vector<std::size_t> report_indices(std::size_t n, std::size_t limit) {
    std::vector<std::size_t> idx(std::min(n, limit));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

/// Risk report on a fixed prefix of the current data (intra) and of
/// buffer + current data (inter).
CpnsReport epoch_report(Context& ctx, bool with_inter, GeneratorCounters& counters, int stage) {
    ExpandableModel& model = ctx.model;
    std::vector<IntraPoint> intra;
    for (std::size_t i : report_indices(ctx.current.size(), ctx.config.report_samples)) {
        const Item& it = ctx.current[i];
        intra.push_back({model.features(ctx.t, it.sample->x), it.sample->label - ctx.range.offset});
    }
    std::vector<InterPoint> inter;
    if (with_inter && ctx.t >= 1) {
        std::vector<const Item*> pool;
        for (const Item& it : ctx.replay) {
            pool.push_back(&it);
        }
        for (const Item& it : ctx.current) {
            pool.push_back(&it);
        }
        for (std::size_t i : report_indices(pool.size(), ctx.config.report_samples)) {
            const Item& it = *pool[i];
            InterPoint p;
            p.old_features = it.old_features;
            p.feature = model.features(ctx.t, it.sample->x);
            p.projected = model.projector().forward(it.old_features);
            p.label = it.sample->label;
            inter.push_back(std::move(p));
        }
    }
    (stage == 1 ? counters.stage1_intra : counters.stage2_intra) += intra.size();
    (stage == 1 ? counters.stage1_inter : counters.stage2_inter) += inter.size();
    CpnsReport r = report_from_points(intra, inter, model.intra(), model.inter(), ctx.cf);
    assert_proposition1(r);
    return r;
}

void finish_epoch(TrainResult& result, EpochMetrics m, Clock::time_point start, const TrainConfig& config,
                  std::size_t batches, const EpochCallback& on_epoch) {
    const double inv = batches > 0 ? 1.0 / static_cast<double>(batches) : 0.0;
    m.loss.cls *= inv;
    m.loss.aux *= inv;
    m.loss.intra *= inv;
    m.loss.inter *= inv;
    m.loss.kl *= inv;
    m.loss.proj *= inv;
    if (config.record_wall_time) {
        m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    }
    if (on_epoch) {
        on_epoch(m);
    }
    result.epochs.push_back(std::move(m));
}

void train_projector(Context& ctx, std::span<const Item* const> items, std::span<const Vector> targets,
                     LossTerms& loss) {
    std::vector<Vector> olds;
    olds.reserve(items.size());
    for (const Item* it : items) {
        olds.push_back(it->old_features);
    }
    loss.proj += projector_loss(ctx.model.projector(), olds, targets);
}

void run_stage1(Context& ctx, Rng& rng, TrainResult& result, const EpochCallback& on_epoch) {
    const TrainConfig& c = ctx.config;
    ExpandableModel& model = ctx.model;
    const bool intra_on = c.intra_active();
    const bool proj_on = ctx.t >= 1 && c.inter_active();
    std::vector<std::string> prefixes = {"extractor." + std::to_string(ctx.t), "intra"};
    if (proj_on) {
        prefixes.push_back("projector");
    }
    const NamedParams params = select_params(model, prefixes);
    const OptimizerConfig opt = OptimizerConfig::from(c);
    OptimizerState state;
    const std::size_t per_epoch = (ctx.current.size() + c.batch_size - 1) / c.batch_size;
    const std::size_t total_steps = per_epoch * static_cast<std::size_t>(c.stage1_epochs);

    for (int epoch = 0; epoch < c.stage1_epochs; ++epoch) {
        const auto start = Clock::now();
        EpochMetrics m;
        m.task = ctx.t;
        m.stage = 1;
        m.epoch = epoch;
        const std::vector<std::size_t> order = shuffled(ctx.current.size(), rng);
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += c.batch_size) {
            const std::size_t hi = std::min(order.size(), lo + c.batch_size);
            const double w = 1.0 / static_cast<double>(hi - lo);
            zero_grads(params);
            std::vector<const Item*> items;
            std::vector<Vector> targets;
            for (std::size_t k = lo; k < hi; ++k) {
                const Item& it = ctx.current[order[k]];
                const std::size_t y = it.sample->label - ctx.range.offset;
                Graph g;
                const NodeRef feat = model.current_extractor().net.forward(g, g.constant(it.sample->x), true);
                const Vector fv(g.value(feat).begin(), g.value(feat).end());
                NodeRef loss;
                if (intra_on) {
                    const CounterfactualSample cf =
                        gen_intra(fv, y, model.intra(), ctx.cf.alpha, ctx.cf.epsilon, ctx.cf.generator);
                    ++result.counters.stage1_intra;
                    const NodeRef cbar = straight_through(g, feat, cf.delta);
                    const NodeRef s = surrogate_intra_loss(g, feat, cbar, y, model.intra(), true, c.nu);
                    const NodeRef kl = divergence_node(g, c.divergence, feat, cbar);
                    m.loss.intra += g.scalar(s) * w;
                    m.loss.kl += g.scalar(kl) * w;
                    loss = g.scale(s, w);
                    if (c.kl_backprop && c.gamma > 0.0) {
                        loss = g.add(loss, g.scale(kl, c.gamma * w));
                    }
                } else {
                    const NodeRef ce = g.softmax_cross_entropy(model.intra().forward(g, feat, true), y);
                    m.loss.intra += g.scalar(ce) * w;
                    loss = g.scale(ce, w);
                }
                g.backward(loss);
                if (proj_on) {
                    items.push_back(&it);
                    targets.push_back(fv);
                }
            }
            if (proj_on) {
                train_projector(ctx, items, targets, m.loss);
            }
            optimizer_step(params, state, opt, scheduled_lr(c, state.step, total_steps));
            ++batches;
        }
        m.report = epoch_report(ctx, false, result.counters, 1);
        finish_epoch(result, std::move(m), start, c, batches, on_epoch);
    }
}

/// Stage-2 batch plan shared by both code paths: shuffled current
/// minibatches, each paired with an equal-size draw from the buffer.
template <typename BatchFn>
void for_each_stage2_batch(Context& ctx, Rng& rng, BatchFn&& fn) {
    const TrainConfig& c = ctx.config;
    const std::vector<std::size_t> order = shuffled(ctx.current.size(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += c.batch_size) {
        const std::size_t hi = std::min(order.size(), lo + c.batch_size);
        std::vector<const Item*> cur;
        for (std::size_t k = lo; k < hi; ++k) {
            cur.push_back(&ctx.current[order[k]]);
        }
        std::vector<const Item*> rep;
        if (!ctx.replay.empty()) {
            for (std::size_t k : draw(ctx.replay.size(), cur.size(), rng)) {
                rep.push_back(&ctx.replay[k]);
            }
        }
        fn(cur, rep);
    }
}

std::size_t stage2_steps(const Context& ctx) {
    const std::size_t per_epoch = (ctx.current.size() + ctx.config.batch_size - 1) / ctx.config.batch_size;
    return per_epoch * static_cast<std::size_t>(ctx.config.stage2_epochs);
}

void run_stage2(Context& ctx, Rng& rng, TrainResult& result, const EpochCallback& on_epoch) {
    const TrainConfig& c = ctx.config;
    ExpandableModel& model = ctx.model;
    const bool intra_on = c.intra_active();
    const bool inter_on = ctx.t >= 1 && c.inter_active();

    std::vector<std::string> prefixes = {"extractor." + std::to_string(ctx.t), "cls"};
    if (ctx.t >= 1) {
        prefixes.push_back("aux");
    }
    if (intra_on) {
        prefixes.push_back("intra");
    }
    if (inter_on) {
        prefixes.push_back("inter");
        prefixes.push_back("projector");
    }
    const NamedParams params = select_params(model, prefixes);
    const OptimizerConfig opt = OptimizerConfig::from(c);
    OptimizerState state;
    const std::size_t total_steps = stage2_steps(ctx);

    for (int epoch = 0; epoch < c.stage2_epochs; ++epoch) {
        const auto start = Clock::now();
        EpochMetrics m;
        m.task = ctx.t;
        m.stage = 2;
        m.epoch = epoch;
        std::size_t batches = 0;
        for_each_stage2_batch(ctx, rng, [&](const std::vector<const Item*>& cur, const std::vector<const Item*>& rep) {
            std::vector<const Item*> all = cur;
            all.insert(all.end(), rep.begin(), rep.end());
            const double w_all = 1.0 / static_cast<double>(all.size());
            const double w_cur = 1.0 / static_cast<double>(cur.size());
            zero_grads(params);
            std::vector<Vector> targets;
            for (std::size_t k = 0; k < all.size(); ++k) {
                const Item& it = *all[k];
                const bool is_current = k < cur.size();
                Graph g;
                BaseGraph b = build_base(g, ctx, it, w_all);
                m.loss.cls += b.cls * w_all;
                m.loss.aux += b.aux * w_all;
                NodeRef loss = b.loss;
                const Vector fv(g.value(b.feature).begin(), g.value(b.feature).end());

                if (intra_on && is_current) {
                    const std::size_t y = it.sample->label - ctx.range.offset;
                    const CounterfactualSample cf =
                        gen_intra(fv, y, model.intra(), ctx.cf.alpha, ctx.cf.epsilon, ctx.cf.generator);
                    ++result.counters.stage2_intra;
                    const NodeRef cbar = straight_through(g, b.feature, cf.delta);
                    const NodeRef s = surrogate_intra_loss(g, b.feature, cbar, y, model.intra(), true, c.nu);
                    const NodeRef kl = divergence_node(g, c.divergence, b.feature, cbar);
                    m.loss.intra += g.scalar(s) * w_cur;
                    m.loss.kl += g.scalar(kl) * w_cur;
                    loss = g.add(loss, g.scale(s, w_cur));
                    if (c.kl_backprop && c.gamma > 0.0) {
                        loss = g.add(loss, g.scale(kl, c.gamma * w_cur));
                    }
                }
                if (inter_on) {
                    const Vector proj = model.projector().forward(it.old_features);
                    const CounterfactualSample cf = gen_inter(fv, proj, ctx.cf.beta, ctx.cf.epsilon, ctx.cf.generator);
                    ++result.counters.stage2_inter;
                    const NodeRef cbar = straight_through(g, b.feature, cf.delta);
                    const NodeRef parts[] = {g.constant(it.old_features), cbar};
                    const NodeRef zbar = g.concat(parts);
                    const NodeRef s = surrogate_inter_loss(g, model, b.z, zbar, it.sample->label, true, c.nu);
                    const NodeRef kl = divergence_node(g, c.divergence, b.feature, cbar);
                    m.loss.inter += g.scalar(s) * w_all;
                    m.loss.kl += g.scalar(kl) * w_all;
                    loss = g.add(loss, g.scale(s, c.lambda * w_all));
                    if (c.kl_backprop && c.gamma > 0.0) {
                        loss = g.add(loss, g.scale(kl, c.gamma * w_all));
                    }
                    targets.push_back(fv);
                }
                g.backward(loss);
            }
            if (inter_on) {
                train_projector(ctx, all, targets, m.loss);
            }
            optimizer_step(params, state, opt, scheduled_lr(c, state.step, total_steps));
            ++batches;
        });
        m.report = epoch_report(ctx, true, result.counters, 2);
        finish_epoch(result, std::move(m), start, c, batches, on_epoch);
    }
}

} // namespace

TrainResult train_task(ExpandableModel& model, const Dataset& task_train, const RehearsalBuffer& buffer,
                       const TrainConfig& config, Rng& rng, const EpochCallback& on_epoch) {
    std::vector<Sample> replay;
    Context ctx = make_context(model, task_train, buffer, config, replay);
    TrainResult result;
    run_stage1(ctx, rng, result, on_epoch);
    run_stage2(ctx, rng, result, on_epoch);
    for (const auto& [name, t] : model.named_tensors()) {
        if (!t->all_finite()) {
            throw NumericError("train_task: non-finite parameter " + name);
        }
    }
    return result;
}

TrainResult train_task_baseline(ExpandableModel& model, const Dataset& task_train, const RehearsalBuffer& buffer,
                                const TrainConfig& config, Rng& rng, const EpochCallback& on_epoch) {
    std::vector<Sample> replay;
    Context ctx = make_context(model, task_train, buffer, config, replay);
    std::vector<std::string> prefixes = {"extractor." + std::to_string(ctx.t), "cls"};
    if (ctx.t >= 1) {
        prefixes.push_back("aux");
    }
    const NamedParams params = select_params(model, prefixes);
    const OptimizerConfig opt = OptimizerConfig::from(config);
    OptimizerState state;
    const std::size_t total_steps = stage2_steps(ctx);
    TrainResult result;
    for (int epoch = 0; epoch < config.stage2_epochs; ++epoch) {
        const auto start = Clock::now();
        EpochMetrics m;
        m.task = ctx.t;
        m.stage = 2;
        m.epoch = epoch;
        std::size_t batches = 0;
        for_each_stage2_batch(ctx, rng, [&](const std::vector<const Item*>& cur, const std::vector<const Item*>& rep) {
            std::vector<const Item*> all = cur;
            all.insert(all.end(), rep.begin(), rep.end());
            const double w = 1.0 / static_cast<double>(all.size());
            zero_grads(params);
            for (const Item* it : all) {
                Graph g;
                BaseGraph b = build_base(g, ctx, *it, w);
                m.loss.cls += b.cls * w;
                m.loss.aux += b.aux * w;
                g.backward(b.loss);
            }
            optimizer_step(params, state, opt, scheduled_lr(config, state.step, total_steps));
            ++batches;
        });
        m.report = epoch_report(ctx, true, result.counters, 2);
        finish_epoch(result, std::move(m), start, config, batches, on_epoch);
    }
    return result;
}

} // namespace cpns
