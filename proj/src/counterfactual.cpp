// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/counterfactual.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cpns {

const char* to_string(Scope s) { return s == Scope::Intra ? "intra" : "inter"; }

const char* to_string(Divergence d) {
    switch (d) {
    case Divergence::Kl: return "kl";
    case Divergence::Mse: return "mse";
    case Divergence::Wasserstein: return "wasserstein";
    case Divergence::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

Divergence parse_divergence(const std::string& name) {
    if (name == "kl") return Divergence::Kl;
    if (name == "mse") return Divergence::Mse;
    if (name == "wasserstein") return Divergence::Wasserstein;
    if (name == "cross_entropy") return Divergence::CrossEntropy;
    throw ConfigError("unknown divergence: " + name);
}

double divergence(Divergence kind, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw ConfigError("divergence: dimension mismatch");
    }
    switch (kind) {
    case Divergence::Kl: return kernels::kl_softmax(a, b);
    case Divergence::CrossEntropy: return kernels::kl_softmax(b, a);
    case Divergence::Mse: {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        return acc / static_cast<double>(a.size());
    }
    case Divergence::Wasserstein: {
        Vector sa(a.begin(), a.end());
        Vector sb(b.begin(), b.end());
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        double acc = 0.0;
        for (std::size_t i = 0; i < sa.size(); ++i) {
            acc += std::abs(sa[i] - sb[i]);
        }
        return acc / static_cast<double>(sa.size());
    }
    }
    return 0.0;
}

NodeRef divergence_node(Graph& g, Divergence kind, NodeRef a, NodeRef b) {
    switch (kind) {
    case Divergence::Kl: return g.kl_softmax(a, b);
    case Divergence::CrossEntropy: return g.kl_softmax(b, a);
    case Divergence::Mse: {
        NodeRef diff = g.sub(a, b);
        const double d = static_cast<double>(g.value(a).size());
        return g.scale(g.sum(g.hadamard(diff, diff)), 1.0 / d);
    }
    case Divergence::Wasserstein: return g.wasserstein_1d(a, b);
    }
    throw ConfigError("divergence_node: unknown kind");
}

namespace {

Vector axpy(std::span<const double> base, double s, std::span<const double> dir) {
    Vector out(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        out[i] = base[i] + s * dir[i];
    }
    return out;
}

Vector diff(std::span<const double> a, std::span<const double> b) {
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return out;
}

CounterfactualSample degenerate_sample(Scope scope, std::span<const double> factual) {
    CounterfactualSample s;
    s.scope = scope;
    s.factual.assign(factual.begin(), factual.end());
    s.counterfactual = s.factual;
    s.delta.assign(factual.size(), 0.0);
    s.applied_scale = 0.0;
    s.kl_value = 0.0;
    s.degenerate = true;
    return s;
}

/// Constraint value for a candidate. Predictive space compares the class
/// posteriors of `head` when one is supplied.
double constraint(const GeneratorOptions& opts, std::span<const double> candidate, std::span<const double> factual,
                  const LinearHead* head) {
    if (opts.space == ConstraintSpace::Predictive) {
        if (head == nullptr) {
            throw ConfigError("predictive constraint space needs a classifier head");
        }
        return divergence(opts.divergence, head->forward(candidate), head->forward(factual));
    }
    return divergence(opts.divergence, candidate, factual);
}

void check_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        throw ConfigError(std::string(name) + " must be positive and finite");
    }
}

/// Halves `scale` until factual + sign*scale*dir meets the budget.
CounterfactualSample backtrack(Scope scope, std::span<const double> factual, std::span<const double> dir,
                               double sign, double scale, double epsilon, const GeneratorOptions& opts,
                               const LinearHead* head) {
    for (int k = 0; k <= opts.max_halvings; ++k) {
        Vector candidate = axpy(factual, sign * scale, dir);
        const double value = constraint(opts, candidate, factual, head);
        if (value <= epsilon) {
            CounterfactualSample s;
            s.scope = scope;
            s.factual.assign(factual.begin(), factual.end());
            s.delta = diff(candidate, factual);
            s.counterfactual = std::move(candidate);
            s.applied_scale = scale;
            s.kl_value = value;
            return s;
        }
        scale *= 0.5;
    }
    return degenerate_sample(scope, factual);
}

} // namespace

Vector intra_loss_gradient(std::span<const double> factual, std::size_t label, const LinearHead& w_intra) {
    Graph g;
    NodeRef c = g.input(factual);
    NodeRef logits =
        g.linear(c, g.frozen(w_intra.weight()), g.frozen(w_intra.bias()));
    NodeRef loss = g.softmax_cross_entropy(logits, label);
    g.backward(loss);
    auto grad = g.grad_wrt(c);
    return Vector(grad.begin(), grad.end());
}

CounterfactualSample gen_intra(std::span<const double> factual, std::size_t label, const LinearHead& w_intra,
                               double alpha, double epsilon, const GeneratorOptions& opts) {
    check_positive(alpha, "alpha");
    check_positive(epsilon, "epsilon");
    const Vector g = intra_loss_gradient(factual, label, w_intra);
    if (kernels::squared_norm(g) == 0.0) {
        return degenerate_sample(Scope::Intra, factual);
    }
    return backtrack(Scope::Intra, factual, g, 1.0, alpha, epsilon, opts, &w_intra);
}

CounterfactualSample gen_inter(std::span<const double> factual, std::span<const double> projected, double beta,
                               double epsilon, const GeneratorOptions& opts) {
    check_positive(beta, "beta");
    check_positive(epsilon, "epsilon");
    if (factual.size() != projected.size()) {
        throw InputError("gen_inter: projected feature has wrong dimension");
    }
    if (opts.space == ConstraintSpace::Predictive) {
        throw ConfigError("gen_inter: predictive constraint space is not available for the inter scope");
    }
    // grad_c ||c - c_tilde||^2 through the graph.
    Graph g;
    NodeRef c = g.input(factual);
    NodeRef target = g.constant(projected);
    NodeRef d = g.sub(c, target);
    NodeRef loss = g.sum(g.hadamard(d, d));
    g.backward(loss);
    auto grad_span = g.grad_wrt(c);
    const Vector grad(grad_span.begin(), grad_span.end());

    CounterfactualSample s;
    if (kernels::squared_norm(grad) == 0.0) {
        s = degenerate_sample(Scope::Inter, factual);
    } else {
        s = backtrack(Scope::Inter, factual, grad, -1.0, beta, epsilon, opts, nullptr);
    }
    s.reference.assign(projected.begin(), projected.end());
    return s;
}

CounterfactualSample perturb_random(std::span<const double> factual, double budget, Rng& rng,
                                    const GeneratorOptions& opts) {
    check_positive(budget, "budget");
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector dir(factual.size());
    for (double& v : dir) {
        v = normal(rng);
    }
    const double n = kernels::norm(dir);
    if (n == 0.0) {
        return degenerate_sample(Scope::Intra, factual);
    }
    for (double& v : dir) {
        v /= n;
    }
    auto value_at = [&](double s) { return divergence(opts.divergence, axpy(factual, s, dir), factual); };

    // Grow until infeasible, then bisect the boundary from the feasible side.
    double lo = 0.0;
    double hi = 1.0;
    int grow = 0;
    while (value_at(hi) <= budget && grow < 60) {
        lo = hi;
        hi *= 2.0;
        ++grow;
    }
    if (value_at(hi) <= budget) {
        lo = hi;
    } else {
        for (int k = 0; k < 40; ++k) {
            const double mid = 0.5 * (lo + hi);
            if (value_at(mid) <= budget) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    if (lo == 0.0) {
        return degenerate_sample(Scope::Intra, factual);
    }
    CounterfactualSample s;
    s.scope = Scope::Intra;
    s.factual.assign(factual.begin(), factual.end());
    s.counterfactual = axpy(factual, lo, dir);
    s.delta = diff(s.counterfactual, factual);
    s.applied_scale = lo;
    s.kl_value = divergence(opts.divergence, s.counterfactual, factual);
    return s;
}

CounterfactualSample perturb_pgd(std::span<const double> factual, std::size_t label, const LinearHead& w_intra,
                                 int steps, double step_size, double budget, const GeneratorOptions& opts) {
    if (steps < 1) {
        throw ConfigError("perturb_pgd: steps must be >= 1");
    }
    check_positive(step_size, "step_size");
    check_positive(budget, "budget");
    Vector current(factual.begin(), factual.end());
    bool moved = false;
    for (int step = 0; step < steps; ++step) {
        const Vector g = intra_loss_gradient(current, label, w_intra);
        if (kernels::squared_norm(g) == 0.0) {
            break;
        }
        Vector candidate = axpy(current, step_size, g);
        if (constraint(opts, candidate, factual, &w_intra) > budget) {
            const Vector dir = diff(candidate, factual);
            double lo = 0.0;
            double hi = 1.0;
            for (int k = 0; k < 10; ++k) {
                const double mid = 0.5 * (lo + hi);
                if (constraint(opts, axpy(factual, mid, dir), factual, &w_intra) <= budget) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            candidate = axpy(factual, lo, dir);
        }
        moved = moved || candidate != current;
        current = std::move(candidate);
    }
    if (!moved) {
        return degenerate_sample(Scope::Intra, factual);
    }
    CounterfactualSample s;
    s.scope = Scope::Intra;
    s.factual.assign(factual.begin(), factual.end());
    s.delta = diff(current, factual);
    s.applied_scale = kernels::norm(s.delta);
    s.kl_value = constraint(opts, current, factual, &w_intra);
    s.counterfactual = std::move(current);
    return s;
}

} // namespace cpns
