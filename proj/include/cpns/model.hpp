// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expansion-based class-incremental model: one feature extractor per task
// (all but the newest frozen), a unified classifier over the concatenated
// features whose old rows are inherited at every expansion, an auxiliary
// head with an aggregated "old" bucket, an intra-task head over the newest
// features, and a projector from frozen features to the newest feature space.

#pragma once

#include "cpns/autodiff.hpp"
#include "cpns/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cpns {

using Rng = std::mt19937_64;

struct ModelConfig {
    std::size_t input_dim = 64;
    std::vector<std::size_t> hidden = {64};
    std::size_t feature_dim = 32;
    /// Apply ReLU to the extractor output layer as well as hidden layers.
    bool feature_relu = true;
    /// Hidden width of the projector; 0 means "same as feature_dim".
    std::size_t projector_hidden = 0;
    /// Use a dedicated inter-task head instead of sharing the unified
    /// classifier.
    bool separate_inter_head = false;

    void validate() const;
};

/// Multi-layer perceptron with ReLU between layers. Parameters are named
/// W<i>/b<i> for layer i.
class Mlp {
  public:
    Mlp() = default;
    Mlp(std::vector<std::size_t> layer_dims, bool output_relu, Rng& rng);

    /// Builds the forward pass into `g`. When `trainable` is false the
    /// parameters enter the graph as constants.
    NodeRef forward(Graph& g, NodeRef x, bool trainable);
    /// Forward pass with every parameter entering as a constant.
    NodeRef forward(Graph& g, NodeRef x) const;
    Vector forward(std::span<const double> x) const;
    /// Post-activation output of every layer (hidden layers first, the
    /// output layer last).
    std::vector<Vector> activations(std::span<const double> x) const;

    const std::vector<std::size_t>& layer_dims() const { return dims_; }
    std::size_t input_dim() const { return dims_.front(); }
    std::size_t output_dim() const { return dims_.back(); }
    std::size_t layer_count() const { return dims_.size() - 1; }
    bool output_relu() const { return output_relu_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    bool frozen() const { return frozen_; }
    void set_frozen(bool frozen);

  private:
    std::vector<std::size_t> dims_;
    bool output_relu_ = false;
    bool frozen_ = false;
    ParameterSet params_;
};

/// Feature extractor f_j for task j.
struct FeatureExtractor {
    Mlp net;
    std::size_t task_index = 0;
};

/// Affine head: logits = W x + b.
class LinearHead {
  public:
    LinearHead() = default;
    LinearHead(std::size_t out, std::size_t in, Rng& rng);

    NodeRef forward(Graph& g, NodeRef x, bool trainable);
    NodeRef forward(Graph& g, NodeRef x) const;
    Vector forward(std::span<const double> x) const;
    std::size_t out_dim() const { return params_.at("weight").rows(); }
    std::size_t in_dim() const { return params_.at("weight").cols(); }
    Tensor& weight() { return params_.at("weight"); }
    const Tensor& weight() const { return params_.at("weight"); }
    Tensor& bias() { return params_.at("bias"); }
    const Tensor& bias() const { return params_.at("bias"); }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

  private:
    ParameterSet params_;
};

/// Global label range [offset, offset + count) owned by one task.
struct ClassRange {
    std::size_t offset = 0;
    std::size_t count = 0;
    bool contains(std::size_t label) const { return label >= offset && label < offset + count; }
};

class ExpandableModel {
  public:
    ExpandableModel() = default;
    ExpandableModel(ModelConfig config, std::uint64_t seed);

    /// Freezes the current extractor, appends a fresh one, and widens the
    /// unified classifier. Old classifier rows keep their weights verbatim and
    /// get zero weights on the new feature block, so old-class logits are
    /// unchanged by the expansion itself.
    void expand(std::size_t new_class_count);

    bool empty() const { return extractors_.empty(); }
    /// Index t of the newest task. Requires at least one extractor.
    std::size_t current_task() const;
    std::size_t extractor_count() const { return extractors_.size(); }
    std::size_t feature_dim() const { return config_.feature_dim; }
    std::size_t input_dim() const { return config_.input_dim; }
    std::size_t total_classes() const;
    std::size_t current_class_count() const;
    const std::vector<ClassRange>& class_ranges() const { return ranges_; }
    const ClassRange& current_range() const;
    /// Task index owning a global label. Throws InputError if unknown.
    std::size_t task_of(std::size_t label) const;
    const ModelConfig& config() const { return config_; }

    FeatureExtractor& extractor(std::size_t i) { return extractors_.at(i); }
    const FeatureExtractor& extractor(std::size_t i) const { return extractors_.at(i); }
    FeatureExtractor& current_extractor();
    const FeatureExtractor& current_extractor() const;

    LinearHead& cls() { return cls_; }
    const LinearHead& cls() const { return cls_; }
    LinearHead& aux();
    const LinearHead& aux() const;
    bool has_aux() const { return aux_.has_value(); }
    LinearHead& intra() { return intra_; }
    const LinearHead& intra() const { return intra_; }
    /// Inter-task head; the unified classifier unless configured separately.
    LinearHead& inter() { return inter_ ? *inter_ : cls_; }
    const LinearHead& inter() const { return inter_ ? *inter_ : cls_; }
    bool inter_is_tied() const { return !inter_.has_value(); }
    Mlp& projector();
    const Mlp& projector() const;
    bool has_projector() const { return projector_.has_value(); }

    /// Logits over all seen classes from [f_0(x), ..., f_t(x)].
    Vector forward_concat(std::span<const double> x) const;
    /// Logits over |C_t| + 1 classes; index |C_t| is the aggregated old class.
    Vector forward_aux(std::span<const double> x) const;
    /// Logits over the |C_t| current classes from f_t(x).
    Vector forward_intra(std::span<const double> x) const;
    /// P([f_0(x), ..., f_{t-1}(x)]) in the current feature space.
    Vector project_old(std::span<const double> x) const;

    Vector features(std::size_t extractor_index, std::span<const double> x) const;
    /// [f_0(x), ..., f_{t-1}(x)]; empty at t = 0.
    Vector old_features(std::span<const double> x) const;
    Vector concat_features(std::span<const double> x) const;

    /// Tensors that the optimizer may update (excludes frozen extractors).
    std::vector<Tensor*> trainable_tensors();
    /// Every tensor in a fixed order (extractors, cls, aux, intra, inter,
    /// projector).
    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
    void zero_grad();

    Rng& rng() { return rng_; }

    void save(const std::filesystem::path& path) const;
    static ExpandableModel load(const std::filesystem::path& path);

  private:
    void check_input(std::span<const double> x) const;

    ModelConfig config_;
    Rng rng_;
    std::vector<FeatureExtractor> extractors_;
    std::vector<ClassRange> ranges_;
    LinearHead cls_;
    std::optional<LinearHead> aux_;
    LinearHead intra_;
    std::optional<LinearHead> inter_;
    std::optional<Mlp> projector_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

} // namespace cpns
