// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation instruments: incremental accuracy, old-to-new error grouped by
// prototype overlap, linear CKA, factor-masking curves, counterfactual
// quality, and 1-D Wasserstein distances.

#pragma once

#include "cpns/counterfactual.hpp"
#include "cpns/cpns_risk.hpp"
#include "cpns/model.hpp"
#include "cpns/task_data.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cpns {

struct IncrementalAccuracy {
    double last = 0.0;
    double avg = 0.0;
};

/// last = final entry, avg = mean over stages. Throws InputError when empty.
IncrementalAccuracy incremental_accuracy(std::span<const double> stage_accuracies);

struct OverlapGroup {
    std::string name;
    double overlap_min = 0.0;
    double overlap_max = 0.0;
    std::vector<std::size_t> classes;
    std::size_t samples = 0;
    /// Fraction of the group's samples predicted into the new-class range.
    double rate = 0.0;
};

/// Per-class overlap (max cosine between the class prototype and any
/// new-class prototype), split into low/medium/high tertiles. `prototypes`
/// is indexed by global label. Throws UsageError at t = 0.
std::vector<OverlapGroup> old_new_error(const ExpandableModel& model, std::span<const Sample> old_test,
                                        const ClassRange& new_range, std::span<const Vector> prototypes);

/// Rate of `predictions` falling in `new_range`, grouped as above. Exposed so
/// the grouping can be checked against arbitrary predictors.
std::vector<OverlapGroup> group_old_new(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                                        const ClassRange& new_range, std::span<const Vector> prototypes);

/// Linear CKA between two row-sample activation matrices. Zero-variance
/// inputs give 0.
double linear_cka(const std::vector<Vector>& x, const std::vector<Vector>& y);

struct CkaLayer {
    std::size_t layer = 0;
    bool shallow = false;
    double value = 0.0;
};

/// CKA between extractors `a` and `b` at every layer on the same inputs.
/// Layers in the first half of the network are labelled shallow.
std::vector<CkaLayer> cka_by_layer(const ExpandableModel& model, std::size_t a, std::size_t b,
                                   std::span<const Sample> inputs);

struct MaskingPoint {
    std::size_t k = 0;
    double acc = 0.0;
};

struct MaskingCurve {
    std::vector<MaskingPoint> points;
    /// (acc(k_first) - acc(k_last)) / (k_last - k_first).
    double avg_drop = 0.0;
};

/// |d logit_y / d x| for the unified classifier.
Vector input_saliency(const ExpandableModel& model, std::span<const double> x, std::size_t label);

/// Zeroes the top-k causal input dimensions of each sample's class, ranked
/// by input saliency, and records accuracy. `ks` must be strictly
/// increasing; 0 is prepended when missing.
MaskingCurve masking_curve(const ExpandableModel& model, std::span<const Sample> test,
                           const FactorAnnotations& factors, std::span<const std::size_t> ks);

double average_drop(std::span<const MaskingPoint> points);

struct CfQuality {
    double pfr = 0.0;
    double lkld = 0.0;
    std::optional<double> hss;
    /// Mean cosine between factual and reference on the inter samples.
    std::optional<double> hss_factual;
    std::size_t count = 0;
};

/// PFR is taken over intra-scope samples through `head`; LKLD over all
/// samples; HSS over inter-scope samples. Throws UsageError when `want_hss`
/// is set and no inter samples are present.
CfQuality counterfactual_quality(std::span<const CounterfactualSample> samples, const LinearHead& head,
                                 bool want_hss);

/// Exact W1 between two empirical distributions.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);
/// W1 per coordinate, averaged.
double sliced_wasserstein(const std::vector<Vector>& a, const std::vector<Vector>& b);

struct EvalRecord {
    std::size_t task_index = 0;
    std::vector<double> task_accuracies;
    double last_acc = 0.0;
    double avg_acc = 0.0;
    std::vector<OverlapGroup> old_new_errors;
    std::vector<CkaLayer> cka_by_layer;
    std::optional<MaskingCurve> masking_curve;
    std::optional<CfQuality> cf_quality;
    CpnsReport cpns_report;
};

void to_json(nlohmann::json& j, const OverlapGroup& g);
void to_json(nlohmann::json& j, const CkaLayer& c);
void to_json(nlohmann::json& j, const MaskingCurve& m);
void to_json(nlohmann::json& j, const CfQuality& q);
void to_json(nlohmann::json& j, const EvalRecord& r);

/// Writes the record as JSON after asserting Proposition 1 on its report.
void write_eval_record(const EvalRecord& record, const std::filesystem::path& path);

struct SummaryRow {
    std::string method;
    std::string scenario;
    std::uint64_t seed = 0;
    double last = 0.0;
    double avg = 0.0;
};

inline constexpr const char* kSummaryHeader = "method,scenario,seed,last,avg";

void write_summary_csv(std::span<const SummaryRow> rows, const std::filesystem::path& path);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

/// Shortest decimal that round-trips.
std::string format_double(double v);

} // namespace cpns
