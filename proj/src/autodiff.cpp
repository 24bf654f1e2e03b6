// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/autodiff.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

namespace cpns {

namespace {

constexpr double kComplementFloor = 1e-12;

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "{";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "," : "") + std::to_string(s[i]);
    }
    return out + "}";
}

} // namespace

const char* to_string(OpTag tag) {
    switch (tag) {
    case OpTag::Input: return "input";
    case OpTag::Constant: return "constant";
    case OpTag::Parameter: return "parameter";
    case OpTag::Linear: return "linear";
    case OpTag::Relu: return "relu";
    case OpTag::Add: return "add";
    case OpTag::Sub: return "sub";
    case OpTag::Scale: return "scale";
    case OpTag::Hadamard: return "hadamard";
    case OpTag::Concat: return "concat";
    case OpTag::Sum: return "sum";
    case OpTag::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpTag::KlSoftmax: return "kl_softmax";
    case OpTag::NegLogComplement: return "neg_log_complement";
    case OpTag::Wasserstein1d: return "wasserstein_1d";
    }
    return "?";
}

std::size_t Graph::numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const Graph::Node& Graph::node(NodeRef n) const {
    if (n.index >= nodes_.size()) {
        throw UsageError("node does not belong to this graph");
    }
    return nodes_[n.index];
}

NodeRef Graph::push(Node&& n) {
    n.grad.assign(n.values.size(), 0.0);
    nodes_.push_back(std::move(n));
    return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeRef Graph::input(std::span<const double> values) {
    Node n{.op = OpTag::Input, .shape = {values.size()}};
    n.values.assign(values.begin(), values.end());
    n.requires_grad = true;
    return push(std::move(n));
}

NodeRef Graph::constant(std::span<const double> values) {
    Node n{.op = OpTag::Constant, .shape = {values.size()}};
    n.values.assign(values.begin(), values.end());
    return push(std::move(n));
}

NodeRef Graph::parameter(Tensor& t) {
    Node n{.op = OpTag::Parameter, .shape = t.shape};
    n.values = t.values;
    n.requires_grad = !t.frozen;
    n.bound = &t;
    return push(std::move(n));
}

NodeRef Graph::frozen(const Tensor& t) {
    Node n{.op = OpTag::Constant, .shape = t.shape};
    n.values = t.values;
    return push(std::move(n));
}

NodeRef Graph::linear(NodeRef x, NodeRef w, NodeRef b) {
    const Node& nx = node(x);
    const Node& nw = node(w);
    const Node& nb = node(b);
    if (nw.shape.size() != 2 || nx.values.size() != nw.shape[1] || nb.values.size() != nw.shape[0]) {
        throw ConfigError("linear: shape mismatch x" + shape_str(nx.shape) + " W" + shape_str(nw.shape) +
                          " b" + shape_str(nb.shape));
    }
    const std::size_t rows = nw.shape[0];
    const std::size_t cols = nw.shape[1];
    Node n{.op = OpTag::Linear, .shape = {rows}};
    n.values.resize(rows);
    kernels::affine(nw.values, rows, cols, nb.values, nx.values, n.values);
    n.parents = {x, w, b};
    n.requires_grad = nx.requires_grad || nw.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::relu(NodeRef x) {
    const Node& nx = node(x);
    Node n{.op = OpTag::Relu, .shape = nx.shape};
    n.values.resize(nx.values.size());
    for (std::size_t i = 0; i < nx.values.size(); ++i) {
        n.values[i] = nx.values[i] > 0.0 ? nx.values[i] : 0.0;
    }
    n.parents = {x};
    n.requires_grad = nx.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::add(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.values.size() != nb.values.size()) {
        throw ConfigError("add: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
    }
    Node n{.op = OpTag::Add, .shape = na.shape};
    n.values.resize(na.values.size());
    for (std::size_t i = 0; i < n.values.size(); ++i) {
        n.values[i] = na.values[i] + nb.values[i];
    }
    n.parents = {a, b};
    n.requires_grad = na.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::sub(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.values.size() != nb.values.size()) {
        throw ConfigError("sub: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
    }
    Node n{.op = OpTag::Sub, .shape = na.shape};
    n.values.resize(na.values.size());
    for (std::size_t i = 0; i < n.values.size(); ++i) {
        n.values[i] = na.values[i] - nb.values[i];
    }
    n.parents = {a, b};
    n.requires_grad = na.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::scale(NodeRef a, double factor) {
    const Node& na = node(a);
    Node n{.op = OpTag::Scale, .shape = na.shape};
    n.values.resize(na.values.size());
    for (std::size_t i = 0; i < n.values.size(); ++i) {
        n.values[i] = factor * na.values[i];
    }
    n.parents = {a};
    n.factor = factor;
    n.requires_grad = na.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::hadamard(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.values.size() != nb.values.size()) {
        throw ConfigError("hadamard: shape mismatch");
    }
    Node n{.op = OpTag::Hadamard, .shape = na.shape};
    n.values.resize(na.values.size());
    for (std::size_t i = 0; i < n.values.size(); ++i) {
        n.values[i] = na.values[i] * nb.values[i];
    }
    n.parents = {a, b};
    n.requires_grad = na.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::concat(std::span<const NodeRef> parts) {
    if (parts.empty()) {
        throw ConfigError("concat: no inputs");
    }
    Node n{.op = OpTag::Concat};
    for (NodeRef p : parts) {
        const Node& np = node(p);
        n.values.insert(n.values.end(), np.values.begin(), np.values.end());
        n.requires_grad = n.requires_grad || np.requires_grad;
    }
    n.shape = {n.values.size()};
    n.parents.assign(parts.begin(), parts.end());
    return push(std::move(n));
}

NodeRef Graph::sum(NodeRef a) {
    const Node& na = node(a);
    Node n{.op = OpTag::Sum, .shape = {1}};
    double acc = 0.0;
    for (double v : na.values) {
        acc += v;
    }
    n.values = {acc};
    n.parents = {a};
    n.requires_grad = na.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::softmax_cross_entropy(NodeRef logits, std::size_t label) {
    const Node& nl = node(logits);
    if (label >= nl.values.size()) {
        throw InputError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(nl.values.size()) + " classes");
    }
    Node n{.op = OpTag::SoftmaxCrossEntropy, .shape = {1}};
    const double lse = kernels::log_sum_exp(nl.values);
    n.values = {lse - nl.values[label]};
    n.cache.resize(nl.values.size());
    for (std::size_t i = 0; i < nl.values.size(); ++i) {
        n.cache[i] = std::exp(nl.values[i] - lse);
    }
    n.label = label;
    n.parents = {logits};
    n.requires_grad = nl.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::kl_softmax(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.values.size() != nb.values.size() || na.values.empty()) {
        throw ConfigError("kl_softmax: dimension mismatch");
    }
    const std::size_t d = na.values.size();
    const double lse_a = kernels::log_sum_exp(na.values);
    const double lse_b = kernels::log_sum_exp(nb.values);
    // cache layout: [p (d) | q (d) | log p - log q (d)]
    Node n{.op = OpTag::KlSoftmax, .shape = {1}};
    n.cache.resize(3 * d);
    double kl = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double log_p = na.values[i] - lse_a;
        const double log_q = nb.values[i] - lse_b;
        n.cache[i] = std::exp(log_p);
        n.cache[d + i] = std::exp(log_q);
        n.cache[2 * d + i] = log_p - log_q;
        kl += n.cache[i] * (log_p - log_q);
    }
    n.values = {std::max(kl, 0.0)};
    n.parents = {a, b};
    n.requires_grad = na.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::neg_log_complement(NodeRef logits, std::size_t label) {
    const Node& nl = node(logits);
    if (label >= nl.values.size()) {
        throw InputError("neg_log_complement: label out of range");
    }
    const double lse = kernels::log_sum_exp(nl.values);
    Node n{.op = OpTag::NegLogComplement, .shape = {1}};
    n.cache.resize(nl.values.size());
    double complement = 0.0;
    for (std::size_t i = 0; i < nl.values.size(); ++i) {
        n.cache[i] = std::exp(nl.values[i] - lse);
        if (i != label) {
            complement += n.cache[i];
        }
    }
    n.values = {-std::log(complement + kComplementFloor)};
    n.factor = complement;
    n.label = label;
    n.parents = {logits};
    n.requires_grad = nl.requires_grad;
    return push(std::move(n));
}

NodeRef Graph::wasserstein_1d(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.values.size() != nb.values.size() || na.values.empty()) {
        throw ConfigError("wasserstein_1d: dimension mismatch");
    }
    const std::size_t d = na.values.size();
    auto order = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        return idx;
    };
    const auto ia = order(na.values);
    const auto ib = order(nb.values);
    // cache layout: [index into a (d) | index into b (d) | sign (d)]
    Node n{.op = OpTag::Wasserstein1d, .shape = {1}};
    n.cache.resize(3 * d);
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = na.values[ia[i]] - nb.values[ib[i]];
        acc += std::abs(diff);
        n.cache[i] = static_cast<double>(ia[i]);
        n.cache[d + i] = static_cast<double>(ib[i]);
        n.cache[2 * d + i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    }
    n.values = {acc / static_cast<double>(d)};
    n.parents = {a, b};
    n.requires_grad = na.requires_grad || nb.requires_grad;
    return push(std::move(n));
}

void Graph::backward(NodeRef root) {
    const Node& r = node(root);
    if (r.values.size() != 1) {
        throw UsageError("backward: root must be scalar, got shape " + shape_str(r.shape));
    }
    std::vector<std::vector<double>> g(root.index + 1);
    g[root.index].assign(1, 1.0);

    auto slot = [&](NodeRef p) -> std::vector<double>& {
        auto& s = g[p.index];
        if (s.empty()) {
            s.assign(nodes_[p.index].values.size(), 0.0);
        }
        return s;
    };

    for (std::size_t idx = root.index + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (g[idx].empty() || !n.requires_grad) {
            continue;
        }
        const std::vector<double>& dy = g[idx];
        switch (n.op) {
        case OpTag::Input:
        case OpTag::Constant:
        case OpTag::Parameter:
            break;
        case OpTag::Linear: {
            const Node& nx = nodes_[n.parents[0].index];
            const Node& nw = nodes_[n.parents[1].index];
            const std::size_t rows = nw.shape[0];
            const std::size_t cols = nw.shape[1];
            if (nx.requires_grad) {
                auto& dx = slot(n.parents[0]);
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* row = nw.values.data() + i * cols;
                    const double s = dy[i];
                    for (std::size_t j = 0; j < cols; ++j) {
                        dx[j] += row[j] * s;
                    }
                }
            }
            if (nw.requires_grad) {
                auto& dw = slot(n.parents[1]);
                for (std::size_t i = 0; i < rows; ++i) {
                    double* row = dw.data() + i * cols;
                    const double s = dy[i];
                    for (std::size_t j = 0; j < cols; ++j) {
                        row[j] += s * nx.values[j];
                    }
                }
            }
            if (nodes_[n.parents[2].index].requires_grad) {
                auto& db = slot(n.parents[2]);
                for (std::size_t i = 0; i < rows; ++i) {
                    db[i] += dy[i];
                }
            }
            break;
        }
        case OpTag::Relu: {
            const Node& nx = nodes_[n.parents[0].index];
            auto& dx = slot(n.parents[0]);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                if (nx.values[i] > 0.0) {
                    dx[i] += dy[i];
                }
            }
            break;
        }
        case OpTag::Add:
        case OpTag::Sub: {
            const double sign = n.op == OpTag::Add ? 1.0 : -1.0;
            if (nodes_[n.parents[0].index].requires_grad) {
                auto& da = slot(n.parents[0]);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da[i] += dy[i];
                }
            }
            if (nodes_[n.parents[1].index].requires_grad) {
                auto& db = slot(n.parents[1]);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    db[i] += sign * dy[i];
                }
            }
            break;
        }
        case OpTag::Scale: {
            auto& da = slot(n.parents[0]);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                da[i] += n.factor * dy[i];
            }
            break;
        }
        case OpTag::Hadamard: {
            const Node& na = nodes_[n.parents[0].index];
            const Node& nb = nodes_[n.parents[1].index];
            if (na.requires_grad) {
                auto& da = slot(n.parents[0]);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da[i] += dy[i] * nb.values[i];
                }
            }
            if (nb.requires_grad) {
                auto& db = slot(n.parents[1]);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    db[i] += dy[i] * na.values[i];
                }
            }
            break;
        }
        case OpTag::Concat: {
            std::size_t offset = 0;
            for (NodeRef p : n.parents) {
                const std::size_t len = nodes_[p.index].values.size();
                if (nodes_[p.index].requires_grad) {
                    auto& dp = slot(p);
                    for (std::size_t i = 0; i < len; ++i) {
                        dp[i] += dy[offset + i];
                    }
                }
                offset += len;
            }
            break;
        }
        case OpTag::Sum: {
            auto& da = slot(n.parents[0]);
            for (double& v : da) {
                v += dy[0];
            }
            break;
        }
        case OpTag::SoftmaxCrossEntropy: {
            auto& dl = slot(n.parents[0]);
            for (std::size_t i = 0; i < dl.size(); ++i) {
                dl[i] += dy[0] * (n.cache[i] - (i == n.label ? 1.0 : 0.0));
            }
            break;
        }
        case OpTag::KlSoftmax: {
            const std::size_t d = n.cache.size() / 3;
            const double kl = n.values[0];
            if (nodes_[n.parents[0].index].requires_grad) {
                auto& da = slot(n.parents[0]);
                for (std::size_t i = 0; i < d; ++i) {
                    da[i] += dy[0] * n.cache[i] * (n.cache[2 * d + i] - kl);
                }
            }
            if (nodes_[n.parents[1].index].requires_grad) {
                auto& db = slot(n.parents[1]);
                for (std::size_t i = 0; i < d; ++i) {
                    db[i] += dy[0] * (n.cache[d + i] - n.cache[i]);
                }
            }
            break;
        }
        case OpTag::NegLogComplement: {
            auto& dl = slot(n.parents[0]);
            const double p_y = n.cache[n.label];
            const double denom = n.factor + kComplementFloor;
            for (std::size_t i = 0; i < dl.size(); ++i) {
                const double dp = p_y * ((i == n.label ? 1.0 : 0.0) - n.cache[i]);
                dl[i] += dy[0] * dp / denom;
            }
            break;
        }
        case OpTag::Wasserstein1d: {
            const std::size_t d = n.cache.size() / 3;
            const double w = dy[0] / static_cast<double>(d);
            if (nodes_[n.parents[0].index].requires_grad) {
                auto& da = slot(n.parents[0]);
                for (std::size_t i = 0; i < d; ++i) {
                    da[static_cast<std::size_t>(n.cache[i])] += w * n.cache[2 * d + i];
                }
            }
            if (nodes_[n.parents[1].index].requires_grad) {
                auto& db = slot(n.parents[1]);
                for (std::size_t i = 0; i < d; ++i) {
                    db[static_cast<std::size_t>(n.cache[d + i])] -= w * n.cache[2 * d + i];
                }
            }
            break;
        }
        }
    }

    for (std::size_t idx = 0; idx <= root.index; ++idx) {
        if (g[idx].empty()) {
            continue;
        }
        Node& n = nodes_[idx];
        if (!n.requires_grad) {
            continue;
        }
        for (std::size_t i = 0; i < g[idx].size(); ++i) {
            n.grad[i] += g[idx][i];
        }
        if (n.bound != nullptr && !n.bound->frozen) {
            for (std::size_t i = 0; i < g[idx].size(); ++i) {
                n.bound->grad[i] += g[idx][i];
            }
        }
    }
    backward_done_ = true;
}

void Graph::zero_grad() {
    for (Node& n : nodes_) {
        std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
}

std::span<const double> Graph::value(NodeRef n) const { return node(n).values; }

double Graph::scalar(NodeRef n) const {
    const Node& nn = node(n);
    if (nn.values.size() != 1) {
        throw UsageError("scalar: node is not scalar");
    }
    return nn.values[0];
}

std::span<const double> Graph::grad(NodeRef n) const { return node(n).grad; }

std::span<const double> Graph::grad_wrt(NodeRef n) const {
    const Node& nn = node(n);
    if (!backward_done_) {
        throw UsageError("grad_wrt: backward has not been run on this graph");
    }
    return nn.grad;
}

const std::vector<std::size_t>& Graph::shape(NodeRef n) const { return node(n).shape; }

OpTag Graph::op(NodeRef n) const { return node(n).op; }

bool Graph::requires_grad(NodeRef n) const { return node(n).requires_grad; }

} // namespace cpns
