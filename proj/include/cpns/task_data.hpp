// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task streams for class-incremental learning.
//
// The synthetic generator realizes a label -> causal factors -> input model
// with a label-correlated spurious block:
//
//   * every class owns d_c causal factors; factor k of class slot j lives in
//     its own block of `rotation_dims` input dimensions;
//   * the first d_mc factors of a class ("minimal causal") get the largest
//     margin, enough to separate the train split alone;
//   * the direction of a factor inside its block rotates from task to task so
//     that the prototype cosine between a class and the same slot in the next
//     task is exactly `overlap`;
//   * a spurious code on `d_s` dedicated dimensions agrees with the label at
//     rate `spurious_strength` in the train split and is independent of the
//     label in the test split.

#pragma once

#include "cpns/model.hpp"
#include "cpns/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cpns {

struct Sample {
    Vector x;
    std::size_t label = 0;
};

struct Dataset {
    std::size_t dims = 0;
    std::size_t classes = 0;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    /// Throws InputError on wrong dimensions or labels >= classes.
    void validate() const;
};

enum class FactorTag { Causal, MinimalCausal, Spurious, Noise };

const char* to_string(FactorTag tag);
FactorTag parse_factor_tag(const std::string& s);

struct FactorAnnotations {
    /// One tag per input dimension.
    std::vector<FactorTag> dim_tags;
    /// Per global class: input dimensions carrying its causal factors.
    std::vector<std::vector<std::size_t>> class_causal_dims;
    /// Per global class: the minimal-causal subset of class_causal_dims.
    std::vector<std::vector<std::size_t>> class_minimal_dims;
    /// Per global class: ground-truth mean of the causal component.
    std::vector<Vector> class_prototypes;
};

struct Task {
    Dataset train;
    Dataset test;
    ClassRange range;
};

struct TaskStream {
    std::size_t input_dim = 0;
    std::vector<Task> tasks;
    std::optional<FactorAnnotations> factors;

    std::size_t total_classes() const;
    /// Checks label-range disjointness and that every label sits in its
    /// task's range. Throws InputError otherwise.
    void validate() const;
};

struct SyntheticScmConfig {
    std::size_t classes_per_task = 4;
    std::size_t num_tasks = 5;
    std::size_t d_c = 3;
    std::size_t d_s = 8;
    std::size_t d_mc = 1;
    double overlap = 0.7;
    double spurious_strength = 0.95;
    double noise_sigma = 1.0;
    std::size_t input_dim = 64;
    std::uint64_t seed = 0;

    std::size_t train_per_class = 100;
    std::size_t test_per_class = 100;
    /// Width of the block each causal factor rotates in (>= 1).
    std::size_t rotation_dims = 3;
    double minimal_margin = 3.0;
    double causal_margin = 1.5;
    /// Per-sample jitter of each causal factor's magnitude.
    double factor_sigma = 0.3;
    double spurious_margin = 6.0;

    void validate() const;
};

TaskStream gen_scm_stream(const SyntheticScmConfig& config);

/// B-I protocol: a base task of B classes, then tasks of I classes each, in a
/// seed-shuffled class order. Classes that do not fill a whole task are
/// dropped. Labels are remapped so task t owns a contiguous range.
TaskStream split_tasks(const Dataset& train, const Dataset& test, std::size_t base, std::size_t increment,
                       std::uint64_t seed);

/// Number of tasks split_tasks produces for `classes` total classes.
std::size_t split_task_count(std::size_t classes, std::size_t base, std::size_t increment);

/// Tabular text format:
///   cpns-tab v1 dims=<D> classes=<K>
///   <label> <f1> ... <fD>
Dataset load_table(const std::filesystem::path& path);
void save_table(const Dataset& data, const std::filesystem::path& path);

/// Sidecar listing one factor tag per dimension (whitespace separated).
std::vector<FactorTag> load_factors(const std::filesystem::path& path);
void save_factors(const std::vector<FactorTag>& tags, const std::filesystem::path& path);

/// Concatenated test sets of tasks [0, upto].
Dataset merged_test(const TaskStream& stream, std::size_t upto);

} // namespace cpns
