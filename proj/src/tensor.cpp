// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/tensor.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace cpns {

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    Tensor t;
    const std::size_t n =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    t.shape = std::move(shape);
    t.values.assign(n, 0.0);
    t.grad.assign(n, 0.0);
    return t;
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

bool Tensor::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

Tensor& ParameterSet::add(const std::string& name, std::vector<std::size_t> shape) {
    if (entries_.count(name) != 0) {
        throw ConfigError("duplicate parameter name: " + name);
    }
    return entries_.emplace(name, Tensor::zeros(std::move(shape))).first->second;
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw UsageError("unknown parameter: " + name);
    }
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw UsageError("unknown parameter: " + name);
    }
    return it->second;
}

void ParameterSet::set_frozen(bool frozen) {
    for (auto& [name, t] : entries_) {
        t.frozen = frozen;
    }
}

void ParameterSet::zero_grad() {
    for (auto& [name, t] : entries_) {
        t.zero_grad();
    }
}

bool ParameterSet::all_finite() const {
    return std::all_of(entries_.begin(), entries_.end(),
                       [](const auto& kv) { return kv.second.all_finite(); });
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) {
        n += t.size();
    }
    return n;
}

namespace kernels {

void affine(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> b,
            std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = w.data() + r * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            acc += row[c] * x[c];
        }
        out[r] = acc + b[r];
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot(a, b) / (na * nb);
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double log_sum_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) {
        acc += std::exp(x - m);
    }
    return m + std::log(acc);
}

Vector softmax(std::span<const double> v) {
    const double lse = log_sum_exp(v);
    Vector p(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        p[i] = std::exp(v[i] - lse);
    }
    return p;
}

double kl_softmax(std::span<const double> a, std::span<const double> b) {
    const double lse_a = log_sum_exp(a);
    const double lse_b = log_sum_exp(b);
    double kl = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double log_p = a[i] - lse_a;
        const double log_q = b[i] - lse_b;
        kl += std::exp(log_p) * (log_p - log_q);
    }
    // Rounding can leave a tiny negative value for (near-)identical inputs.
    return std::max(kl, 0.0);
}

} // namespace kernels

} // namespace cpns
