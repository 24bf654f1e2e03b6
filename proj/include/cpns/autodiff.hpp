// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense vectors and matrices.
//
// A Graph is a tape: every operation appends a node whose parents already
// exist, so insertion order is a topological order and backward is a single
// reverse sweep. Graphs are cheap, single-threaded, and meant to be built per
// sample (or per small batch) and thrown away.

#pragma once

#include "cpns/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cpns {

enum class OpTag : std::uint8_t {
    Input,
    Constant,
    Parameter,
    Linear,
    Relu,
    Add,
    Sub,
    Scale,
    Hadamard,
    Concat,
    Sum,
    SoftmaxCrossEntropy,
    KlSoftmax,
    NegLogComplement,
    Wasserstein1d,
};

const char* to_string(OpTag tag);

/// Handle to a node inside one Graph. Only meaningful for the graph that
/// produced it.
struct NodeRef {
    std::uint32_t index = UINT32_MAX;
    friend bool operator==(NodeRef, NodeRef) = default;
};

class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    /// Leaf whose gradient is tracked (use for intermediate features that
    /// are re-entered as independent variables).
    NodeRef input(std::span<const double> values);
    /// Leaf that never receives gradient.
    NodeRef constant(std::span<const double> values);
    /// Leaf bound to a parameter tensor. After backward, gradients are added
    /// into `t.grad` unless the tensor is frozen. `t` must outlive the graph.
    NodeRef parameter(Tensor& t);
    /// Parameter read as a constant (no gradient ever reaches `t`).
    NodeRef frozen(const Tensor& t);

    /// W x + b with W of shape {out, in}.
    NodeRef linear(NodeRef x, NodeRef w, NodeRef b);
    /// max(0, x); subgradient at exactly 0 is 0.
    NodeRef relu(NodeRef x);
    NodeRef add(NodeRef a, NodeRef b);
    NodeRef sub(NodeRef a, NodeRef b);
    NodeRef scale(NodeRef a, double factor);
    NodeRef hadamard(NodeRef a, NodeRef b);
    NodeRef concat(std::span<const NodeRef> parts);
    NodeRef sum(NodeRef a);
    /// -log softmax(logits)[label]. Throws InputError on a bad label.
    NodeRef softmax_cross_entropy(NodeRef logits, std::size_t label);
    /// KL(softmax(a) || softmax(b)).
    NodeRef kl_softmax(NodeRef a, NodeRef b);
    /// -log(1 - softmax(logits)[label] + 1e-12).
    NodeRef neg_log_complement(NodeRef logits, std::size_t label);
    /// Mean |sort(a)_i - sort(b)_i|: exact 1-D W1 between the empirical
    /// distributions of the entries of two equal-length vectors.
    NodeRef wasserstein_1d(NodeRef a, NodeRef b);

    /// Accumulates d(root)/d(node) into every ancestor that tracks gradient.
    /// Calling twice without zero_grad() doubles every gradient.
    void backward(NodeRef root);
    /// Clears node gradients. Parameter tensors are not touched.
    void zero_grad();

    std::span<const double> value(NodeRef n) const;
    double scalar(NodeRef n) const;
    /// Gradient of the last backward root(s) with respect to `n`.
    std::span<const double> grad(NodeRef n) const;
    /// Like grad(), but fails loudly if backward has not run yet.
    std::span<const double> grad_wrt(NodeRef n) const;
    const std::vector<std::size_t>& shape(NodeRef n) const;
    OpTag op(NodeRef n) const;
    bool requires_grad(NodeRef n) const;
    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        OpTag op;
        std::vector<std::size_t> shape;
        std::vector<double> values;
        std::vector<double> grad;
        std::vector<NodeRef> parents;
        bool requires_grad = false;
        Tensor* bound = nullptr;
        std::size_t label = 0;
        double factor = 0.0;
        // Op-specific forward cache (softmax probabilities, etc).
        std::vector<double> cache;
    };

    const Node& node(NodeRef n) const;
    NodeRef push(Node&& n);
    static std::size_t numel(const std::vector<std::size_t>& shape);

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

} // namespace cpns
