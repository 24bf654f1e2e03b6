// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Empirical CPNS risk, monotonicity-violation measures, interventional PNS
// estimates, and the differentiable surrogates used for training.
//
// Per sample, two indicators are evaluated:
//   sufficiency violation  = [argmax(W h_factual) != y]
//   necessity violation    = [argmax(W h_counterfactual) == y]
// R averages their sum, M averages their product, so M <= R term by term.

#pragma once

#include "cpns/autodiff.hpp"
#include "cpns/counterfactual.hpp"
#include "cpns/model.hpp"
#include "cpns/task_data.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace cpns {

struct CounterfactualConfig {
    double alpha = 1.0;
    double beta = 0.03;
    double epsilon = 0.05;
    GeneratorOptions generator;
};

struct CpnsReport {
    double r_intra = 0.0;
    double r_inter = 0.0;
    double r_total = 0.0;
    double m_intra = 0.0;
    double m_inter = 0.0;
    double m_total = 0.0;
    double pns_intra_est = 0.0;
    double pns_inter_est = 0.0;
    std::size_t n_intra = 0;
    std::size_t n_inter = 0;
};

void to_json(nlohmann::json& j, const CpnsReport& r);
void from_json(const nlohmann::json& j, CpnsReport& r);

/// Indicator outcomes for one sample. `factual_correct` and
/// `counterfactual_correct` are the raw predictions; `degenerate` marks a
/// counterfactual that could not move (counted as a necessity violation).
struct SampleOutcome {
    bool factual_correct = false;
    bool counterfactual_correct = false;
    bool degenerate = false;

    bool sufficiency_violation() const { return !factual_correct; }
    bool necessity_violation() const { return counterfactual_correct || degenerate; }
};

/// Averages indicator outcomes into a report.
CpnsReport aggregate_outcomes(std::span<const SampleOutcome> intra, std::span<const SampleOutcome> inter);

/// Intra-scope inputs: current-task feature and within-task label.
struct IntraPoint {
    Vector feature;
    std::size_t local_label = 0;
};

/// Inter-scope inputs: frozen features, current feature, projected proxy,
/// global label.
struct InterPoint {
    Vector old_features;
    Vector feature;
    Vector projected;
    std::size_t label = 0;
};

SampleOutcome intra_outcome(const IntraPoint& p, const LinearHead& w_intra, const CounterfactualConfig& cf);
SampleOutcome inter_outcome(const InterPoint& p, const LinearHead& w_inter, const CounterfactualConfig& cf);

std::vector<IntraPoint> intra_points(std::span<const Sample> batch, const ExpandableModel& model);
std::vector<InterPoint> inter_points(std::span<const Sample> batch, const ExpandableModel& model);

/// Report from precomputed points (either list may be empty).
CpnsReport report_from_points(std::span<const IntraPoint> intra, std::span<const InterPoint> inter,
                              const LinearHead& w_intra, const LinearHead& w_inter, const CounterfactualConfig& cf);

/// Full report. `current_batch` must hold current-task samples; at t >= 1
/// `buffer_batch` must be non-empty (it may include current-task samples).
/// At t = 0 the inter terms are reported with zero count.
CpnsReport empirical_cpns_risk(std::span<const Sample> current_batch, std::span<const Sample> buffer_batch,
                               const ExpandableModel& model, const CounterfactualConfig& cf);

std::pair<double, double> monotonicity_violation(std::span<const Sample> current_batch,
                                                 std::span<const Sample> buffer_batch, const ExpandableModel& model,
                                                 const CounterfactualConfig& cf);

/// m_total <= r_total.
bool check_proposition1(const CpnsReport& report);
/// Throws InvariantViolation when check_proposition1 fails.
void assert_proposition1(const CpnsReport& report);

/// accuracy(factual) - accuracy(counterfactual) over `eval_set`, in [-1, 1].
/// Intra scope uses current-task samples and the intra head; inter scope uses
/// the concatenated representation and the inter head.
double estimate_pns_interventional(std::span<const Sample> eval_set, const ExpandableModel& model, Scope scope,
                                   const CounterfactualConfig& cf);

/// counterfactual = factual + delta with delta treated as a constant.
NodeRef straight_through(Graph& g, NodeRef factual, std::span<const double> delta);

/// CE(W c_hat, y) + nu * -log(1 - p_y(W c_bar) + 1e-12).
NodeRef surrogate_intra_loss(Graph& g, NodeRef factual, NodeRef counterfactual, std::size_t label,
                             LinearHead& w_intra, bool train_head, double nu);

/// Same two-term structure over concatenated representations and the inter
/// head. Throws UsageError at t = 0.
NodeRef surrogate_inter_loss(Graph& g, ExpandableModel& model, NodeRef z_factual, NodeRef z_counterfactual,
                             std::size_t label, bool train_head, double nu);

/// Value-only evaluations of the surrogates.
double surrogate_intra_value(std::span<const double> factual, std::span<const double> counterfactual,
                             std::size_t label, const LinearHead& w_intra, double nu);
double surrogate_inter_value(const ExpandableModel& model, std::span<const double> z_factual,
                             std::span<const double> z_counterfactual, std::size_t label, double nu);

} // namespace cpns
