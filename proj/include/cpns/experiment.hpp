// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: config loading, the per-seed incremental loop
// (expand, train, commit, evaluate), sweeps and ablations, and the on-disk
// layout <output_dir>/<run_id>/seed-<s>/.

#pragma once

#include "cpns/metrics.hpp"
#include "cpns/model.hpp"
#include "cpns/task_data.hpp"
#include "cpns/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cpns {

struct DataSpec {
    enum class Kind { Scm, Table };
    Kind kind = Kind::Scm;
    SyntheticScmConfig scm;
    std::filesystem::path train_path;
    std::filesystem::path test_path;
    std::filesystem::path factors_path;
    std::size_t base = 0;
    std::size_t increment = 0;
};

struct MetricsToggles {
    bool old_new_error = true;
    bool cka = true;
    bool masking = true;
    std::vector<std::size_t> masking_ks = {0, 1, 2, 3, 5};
    bool cf_quality = true;
    /// Test samples per scope for the risk report and counterfactual quality.
    std::size_t eval_samples = 200;
    bool checkpoints = true;
};

/// Which training code path to use.
enum class MethodPath { Cpns, Baseline };

struct ExperimentConfig {
    std::string run_id = "run";
    std::string method = "cpns";
    std::string scenario = "scm";
    MethodPath path = MethodPath::Cpns;
    std::filesystem::path output_dir = "out";
    std::vector<std::uint64_t> seeds = {0};
    DataSpec data;
    ModelConfig model;
    TrainConfig train;
    MetricsToggles metrics;

    /// Throws ConfigError (or InputError for missing files).
    void validate() const;
};

/// Parses a JSON config. Relative data paths resolve against the config
/// file's directory. Unknown keys are rejected.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json experiment_config_json(const ExperimentConfig& c);

/// Stream seed, model seed and trainer seed derived from a run seed.
struct SeedPlan {
    std::uint64_t stream = 0;
    std::uint64_t model = 0;
    std::uint64_t trainer = 0;
};
SeedPlan plan_seeds(const ExperimentConfig& c, std::uint64_t seed);

TaskStream build_stream(const ExperimentConfig& c, std::uint64_t seed);

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<double> stage_accuracies;
    IncrementalAccuracy accuracy;
    std::vector<EvalRecord> evals;
    /// Final model, kept for in-process analysis.
    ExpandableModel model;
    TaskStream stream;
};

/// Runs the incremental loop for one seed. Artifacts are written under
/// `seed_dir` when it is non-empty.
SeedResult run_seed(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& seed_dir);

/// Runs every seed (up to `threads` at once), writes per-seed artifacts and
/// the run-level summary.csv under <output_dir>/<run_id>/.
std::vector<SeedResult> run_experiment(const ExperimentConfig& c, unsigned threads = 1);

struct MeanAccuracy {
    double last = 0.0;
    double avg = 0.0;
};
MeanAccuracy seed_mean(const std::vector<SeedResult>& results);

/// Parameters accepted by sweep.
bool is_sweep_param(const std::string& name);
void set_sweep_param(TrainConfig& c, const std::string& name, double value);

struct SweepRow {
    std::string value;
    MeanAccuracy mean;
};
std::vector<SweepRow> run_sweep(const ExperimentConfig& c, const std::string& param,
                                const std::vector<std::string>& values, unsigned threads = 1);

struct AblationVariant {
    std::string name;
    bool intra = false;
    bool inter = false;
    bool two_stage = false;
};
/// The six ablation rows, in order.
std::vector<AblationVariant> ablation_variants();
ExperimentConfig ablation_config(const ExperimentConfig& c, const AblationVariant& v);

struct AblationRow {
    AblationVariant variant;
    MeanAccuracy mean;
};
std::vector<AblationRow> run_ablation(const ExperimentConfig& c, unsigned threads = 1);

} // namespace cpns
