// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage task training on top of the expansion baseline, the rehearsal
// buffer, and the optimizers.
//
// Stage 1 trains the newest extractor and the intra head on the intra-task
// objective. Stage 2 trains the base classification losses plus the intra and
// inter surrogates, the divergence penalty and the projector loss.

#pragma once

#include "cpns/cpns_risk.hpp"
#include "cpns/model.hpp"
#include "cpns/task_data.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cpns {

enum class OptimizerKind { SgdMomentum, Adam };
enum class BufferPolicy { Herding, ClassBalancedRandom };
enum class LrSchedule { Constant, Cosine };

const char* to_string(OptimizerKind k);
const char* to_string(BufferPolicy p);
const char* to_string(LrSchedule s);
OptimizerKind parse_optimizer(const std::string& s);
BufferPolicy parse_buffer_policy(const std::string& s);
LrSchedule parse_lr_schedule(const std::string& s);

struct TrainConfig {
    int stage1_epochs = 100;
    int stage2_epochs = 30;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    /// SGD momentum, or Adam's first-moment decay.
    double momentum = 0.95;
    double adam_beta2 = 0.999;
    double weight_decay = 1e-5;
    OptimizerKind optimizer = OptimizerKind::Adam;
    LrSchedule schedule = LrSchedule::Constant;

    double lambda = 0.5;
    double gamma = 1.0;
    double beta = 0.03;
    double alpha = 1.0;
    double epsilon = 0.05;
    double nu = 1.0;
    Divergence divergence = Divergence::Kl;
    /// Back-propagate the divergence penalty into the extractor. When false
    /// the penalty is only reported.
    bool kl_backprop = true;
    /// Ablation switches for the two risk scopes.
    bool intra_scope = true;
    bool inter_scope = true;

    std::size_t buffer_capacity = 2000;
    BufferPolicy buffer_policy = BufferPolicy::Herding;
    std::uint64_t seed = 0;

    /// Samples per scope used for the per-epoch risk report.
    std::size_t report_samples = 128;
    /// Record wall-clock time per epoch (breaks byte-identical logs).
    bool record_wall_time = false;

    void validate() const;
    CounterfactualConfig counterfactual() const;
    bool intra_active() const { return intra_scope && (nu > 0.0 || gamma > 0.0); }
    bool inter_active() const { return inter_scope && lambda > 0.0; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ------------------------------------------------------------------ optimizer

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-2;
    double momentum = 0.95;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    double eps = 1e-8;

    static OptimizerConfig from(const TrainConfig& c);
};

struct OptimizerState {
    std::size_t step = 0;
    std::map<std::string, Vector> first;
    std::map<std::string, Vector> second;
};

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

/// Applies one update from the gradients stored in each tensor. Weight decay
/// is decoupled (p -= lr * wd * p). `lr` overrides config.lr so schedules can
/// be applied by the caller. Throws NumericError on a non-finite gradient.
void optimizer_step(const NamedParams& params, OptimizerState& state, const OptimizerConfig& config, double lr);

// --------------------------------------------------------------------- buffer

class RehearsalBuffer {
  public:
    RehearsalBuffer() = default;
    RehearsalBuffer(std::size_t capacity, BufferPolicy policy);

    std::size_t capacity() const { return capacity_; }
    BufferPolicy policy() const { return policy_; }
    std::size_t size() const;
    bool empty() const { return size() == 0; }
    std::size_t class_count() const { return entries_.size(); }
    const std::map<std::size_t, std::vector<Sample>>& entries() const { return entries_; }
    /// All stored samples, ordered by class then selection order.
    std::vector<Sample> samples() const;

    /// Adds exemplars for the classes in `task_train` and shrinks older
    /// classes to the new quota. Herding uses the model's normalized
    /// concatenated features.
    void commit(const Dataset& task_train, const ExpandableModel& model, Rng& rng);

  private:
    std::size_t capacity_ = 0;
    BufferPolicy policy_ = BufferPolicy::Herding;
    std::map<std::size_t, std::vector<Sample>> entries_;
};

/// Per-class quotas for `classes` sorted labels: floor(capacity / n) each,
/// the remainder going to the earliest classes.
std::vector<std::size_t> class_quotas(std::size_t capacity, std::size_t classes);

/// Greedy herding order: each step picks the sample whose inclusion brings
/// the running exemplar mean closest to the class mean. Ties resolve to the
/// lowest index.
std::vector<std::size_t> herding_select(std::span<const Vector> features, std::size_t count);

// ------------------------------------------------------------------- training

struct LossTerms {
    double cls = 0.0;
    double aux = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double kl = 0.0;
    double proj = 0.0;
};

struct EpochMetrics {
    std::size_t task = 0;
    int stage = 0;
    int epoch = 0;
    LossTerms loss;
    CpnsReport report;
    double wall_ms = 0.0;
};

void to_json(nlohmann::json& j, const LossTerms& l);
void to_json(nlohmann::json& j, const EpochMetrics& m);

struct GeneratorCounters {
    std::size_t stage1_intra = 0;
    std::size_t stage1_inter = 0;
    std::size_t stage2_intra = 0;
    std::size_t stage2_inter = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    GeneratorCounters counters;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains the newest task. The model must already be expanded for it and,
/// from the second task on, the buffer must be non-empty.
TrainResult train_task(ExpandableModel& model, const Dataset& task_train, const RehearsalBuffer& buffer,
                       const TrainConfig& config, Rng& rng, const EpochCallback& on_epoch = {});

/// Plain expansion baseline: classification and auxiliary losses only.
TrainResult train_task_baseline(ExpandableModel& model, const Dataset& task_train, const RehearsalBuffer& buffer,
                                const TrainConfig& config, Rng& rng, const EpochCallback& on_epoch = {});

/// mean ||P(z_old) - target||^2 over the pairs; accumulates gradients into
/// the projector only.
double projector_loss(Mlp& projector, std::span<const Vector> old_features, std::span<const Vector> targets);

/// Projector loss on a batch against the detached newest features.
/// Throws UsageError at t = 0.
double projector_step(ExpandableModel& model, std::span<const Sample> batch);

/// Fraction of samples whose argmax over the unified classifier is correct.
double accuracy(const ExpandableModel& model, std::span<const Sample> samples);

} // namespace cpns
