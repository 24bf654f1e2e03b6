// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual-scope counterfactual feature generation.
//
//   intra:  c_bar = c_hat + s * grad_c CE(W_intra c_hat, y)
//   inter:  c_bar = c_hat - s * grad_c ||c_hat - c_tilde||^2,  c_tilde = P(f_old(x))
//
// In both scopes the step s starts at the nominal value (alpha or beta) and is
// halved until divergence(c_bar, c_hat) <= epsilon. Random and PGD perturbers
// under the same budget are provided for comparison.

#pragma once

#include "cpns/autodiff.hpp"
#include "cpns/model.hpp"
#include "cpns/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>

namespace cpns {

enum class Scope { Intra, Inter };

const char* to_string(Scope s);

/// Semantic-consistency measure between a counterfactual and its factual
/// feature. All variants are 0 when the two vectors coincide.
enum class Divergence {
    Kl,           ///< KL(softmax(a) || softmax(b))
    Mse,          ///< mean squared difference
    Wasserstein,  ///< 1-D W1 between the empirical distributions of entries
    CrossEntropy, ///< H(softmax(b), softmax(a)) - H(softmax(b)), i.e. KL(softmax(b) || softmax(a))
};

const char* to_string(Divergence d);
Divergence parse_divergence(const std::string& name);

double divergence(Divergence kind, std::span<const double> a, std::span<const double> b);
/// Differentiable version for training objectives.
NodeRef divergence_node(Graph& g, Divergence kind, NodeRef a, NodeRef b);

/// Which distributions the constraint compares. Features is the default;
/// Predictive compares class posteriors of the relevant head and is only
/// available where that head is known (intra scope, PGD).
enum class ConstraintSpace { Features, Predictive };

struct CounterfactualSample {
    Scope scope = Scope::Intra;
    Vector factual;
    Vector counterfactual;
    Vector delta;
    /// Step actually used after backtracking (alpha_eff or beta_eff). For
    /// random and PGD perturbations this is the norm of delta.
    double applied_scale = 0.0;
    /// Divergence between counterfactual and factual under the generator's
    /// constraint.
    double kl_value = 0.0;
    /// True when no admissible move exists (zero gradient or no feasible step).
    bool degenerate = false;
    /// Projected old-feature reference c_tilde (inter scope only).
    Vector reference;
};

struct GeneratorOptions {
    Divergence divergence = Divergence::Kl;
    ConstraintSpace space = ConstraintSpace::Features;
    int max_halvings = 30;
};

/// Intra-task counterfactual: gradient ascent on the intra-head loss.
CounterfactualSample gen_intra(std::span<const double> factual, std::size_t label, const LinearHead& w_intra,
                               double alpha, double epsilon, const GeneratorOptions& opts = {});

/// Inter-task counterfactual: pull toward the projected old-feature proxy.
CounterfactualSample gen_inter(std::span<const double> factual, std::span<const double> projected, double beta,
                               double epsilon, const GeneratorOptions& opts = {});

/// Isotropic Gaussian direction, scaled to sit just inside the budget.
CounterfactualSample perturb_random(std::span<const double> factual, double budget, Rng& rng,
                                    const GeneratorOptions& opts = {});

/// Iterated gradient ascent with projection back onto the budget ball by
/// bisection along the segment to the factual point.
CounterfactualSample perturb_pgd(std::span<const double> factual, std::size_t label, const LinearHead& w_intra,
                                 int steps, double step_size, double budget, const GeneratorOptions& opts = {});

/// grad_c CE(W c, label), computed with the autodiff graph.
Vector intra_loss_gradient(std::span<const double> factual, std::size_t label, const LinearHead& w_intra);

} // namespace cpns
