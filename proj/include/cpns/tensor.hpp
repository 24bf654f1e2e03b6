// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cpns {

using Vector = std::vector<double>;

/// Dense row-major array with a gradient buffer of identical shape.
/// Rank 1 tensors are vectors, rank 2 tensors are {rows, cols} matrices.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool frozen = false;

    static Tensor zeros(std::vector<std::size_t> shape);

    std::size_t size() const noexcept { return values.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    void zero_grad();
    bool all_finite() const;
};

/// Named collection of weights. Iteration order is lexicographic by name,
/// which fixes the order of every reduction over parameters.
class ParameterSet {
  public:
    Tensor& add(const std::string& name, std::vector<std::size_t> shape);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    void set_frozen(bool frozen);
    void zero_grad();
    bool all_finite() const;
    std::size_t parameter_count() const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

  private:
    std::map<std::string, Tensor> entries_;
};

namespace kernels {

/// out = W x + b for a row-major W of shape {rows, cols}.
void affine(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> b,
            std::span<const double> x, std::span<double> out);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
double norm(std::span<const double> a);
double cosine(std::span<const double> a, std::span<const double> b);
std::size_t argmax(std::span<const double> v);

/// Numerically stable log-sum-exp (max subtracted).
double log_sum_exp(std::span<const double> v);
Vector softmax(std::span<const double> v);

/// KL(softmax(a) || softmax(b)).
double kl_softmax(std::span<const double> a, std::span<const double> b);

} // namespace kernels

} // namespace cpns
