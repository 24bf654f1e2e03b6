// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/cpns_risk.hpp"

#include "cpns/errors.hpp"

#include <cmath>
#include <string>

namespace cpns {

void to_json(nlohmann::json& j, const CpnsReport& r) {
    j = nlohmann::json{{"r_intra", r.r_intra},
                       {"r_inter", r.r_inter},
                       {"r_total", r.r_total},
                       {"m_intra", r.m_intra},
                       {"m_inter", r.m_inter},
                       {"m_total", r.m_total},
                       {"pns_intra_est", r.pns_intra_est},
                       {"pns_inter_est", r.pns_inter_est},
                       {"n_intra", r.n_intra},
                       {"n_inter", r.n_inter}};
}

void from_json(const nlohmann::json& j, CpnsReport& r) {
    j.at("r_intra").get_to(r.r_intra);
    j.at("r_inter").get_to(r.r_inter);
    j.at("r_total").get_to(r.r_total);
    j.at("m_intra").get_to(r.m_intra);
    j.at("m_inter").get_to(r.m_inter);
    j.at("m_total").get_to(r.m_total);
    j.at("pns_intra_est").get_to(r.pns_intra_est);
    j.at("pns_inter_est").get_to(r.pns_inter_est);
    j.at("n_intra").get_to(r.n_intra);
    j.at("n_inter").get_to(r.n_inter);
}

namespace {

struct Tally {
    double r = 0.0;
    double m = 0.0;
    double pns = 0.0;
};

Tally tally(std::span<const SampleOutcome> outcomes) {
    Tally t;
    if (outcomes.empty()) {
        return t;
    }
    double suff = 0.0;
    double nec = 0.0;
    double both = 0.0;
    double fact_acc = 0.0;
    double cf_acc = 0.0;
    for (const SampleOutcome& o : outcomes) {
        const double s = o.sufficiency_violation() ? 1.0 : 0.0;
        const double n = o.necessity_violation() ? 1.0 : 0.0;
        suff += s;
        nec += n;
        both += s * n;
        fact_acc += o.factual_correct ? 1.0 : 0.0;
        cf_acc += o.counterfactual_correct ? 1.0 : 0.0;
    }
    const double count = static_cast<double>(outcomes.size());
    t.r = (suff + nec) / count;
    t.m = both / count;
    t.pns = (fact_acc - cf_acc) / count;
    return t;
}

bool predicts(const LinearHead& head, std::span<const double> h, std::size_t label) {
    return kernels::argmax(head.forward(h)) == label;
}

Vector joined(std::span<const double> a, std::span<const double> b) {
    Vector out(a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

double surrogate_value(const LinearHead& head, std::span<const double> factual, std::span<const double> counterfactual,
                       std::size_t label, double nu) {
    const Vector logits = head.forward(factual);
    if (label >= logits.size()) {
        throw InputError("label out of range for head");
    }
    const double ce = kernels::log_sum_exp(logits) - logits[label];
    if (nu == 0.0) {
        return ce;
    }
    const Vector p = kernels::softmax(head.forward(counterfactual));
    return ce + nu * -std::log(1.0 - p[label] + 1e-12);
}

} // namespace

CpnsReport aggregate_outcomes(std::span<const SampleOutcome> intra, std::span<const SampleOutcome> inter) {
    const Tally a = tally(intra);
    const Tally e = tally(inter);
    CpnsReport r;
    r.r_intra = a.r;
    r.r_inter = e.r;
    r.r_total = a.r + e.r;
    r.m_intra = a.m;
    r.m_inter = e.m;
    r.m_total = a.m + e.m;
    r.pns_intra_est = a.pns;
    r.pns_inter_est = e.pns;
    r.n_intra = intra.size();
    r.n_inter = inter.size();
    return r;
}

SampleOutcome intra_outcome(const IntraPoint& p, const LinearHead& w_intra, const CounterfactualConfig& cf) {
    const CounterfactualSample s = gen_intra(p.feature, p.local_label, w_intra, cf.alpha, cf.epsilon, cf.generator);
    SampleOutcome o;
    o.factual_correct = predicts(w_intra, p.feature, p.local_label);
    o.counterfactual_correct = predicts(w_intra, s.counterfactual, p.local_label);
    o.degenerate = s.degenerate;
    return o;
}

SampleOutcome inter_outcome(const InterPoint& p, const LinearHead& w_inter, const CounterfactualConfig& cf) {
    const CounterfactualSample s = gen_inter(p.feature, p.projected, cf.beta, cf.epsilon, cf.generator);
    SampleOutcome o;
    o.factual_correct = predicts(w_inter, joined(p.old_features, p.feature), p.label);
    o.counterfactual_correct = predicts(w_inter, joined(p.old_features, s.counterfactual), p.label);
    o.degenerate = s.degenerate;
    return o;
}

std::vector<IntraPoint> intra_points(std::span<const Sample> batch, const ExpandableModel& model) {
    const ClassRange& range = model.current_range();
    std::vector<IntraPoint> out;
    out.reserve(batch.size());
    for (const Sample& s : batch) {
        if (!range.contains(s.label)) {
            throw InputError("intra scope: label " + std::to_string(s.label) + " is outside the current task");
        }
        out.push_back({model.features(model.current_task(), s.x), s.label - range.offset});
    }
    return out;
}

std::vector<InterPoint> inter_points(std::span<const Sample> batch, const ExpandableModel& model) {
    if (model.current_task() == 0) {
        throw UsageError("inter scope is undefined for the first task");
    }
    std::vector<InterPoint> out;
    out.reserve(batch.size());
    for (const Sample& s : batch) {
        if (s.label >= model.total_classes()) {
            throw InputError("inter scope: label " + std::to_string(s.label) + " has not been seen");
        }
        InterPoint p;
        p.old_features = model.old_features(s.x);
        p.feature = model.features(model.current_task(), s.x);
        p.projected = model.projector().forward(p.old_features);
        p.label = s.label;
        out.push_back(std::move(p));
    }
    return out;
}

CpnsReport report_from_points(std::span<const IntraPoint> intra, std::span<const InterPoint> inter,
                              const LinearHead& w_intra, const LinearHead& w_inter, const CounterfactualConfig& cf) {
    std::vector<SampleOutcome> a;
    a.reserve(intra.size());
    for (const IntraPoint& p : intra) {
        a.push_back(intra_outcome(p, w_intra, cf));
    }
    std::vector<SampleOutcome> e;
    e.reserve(inter.size());
    for (const InterPoint& p : inter) {
        e.push_back(inter_outcome(p, w_inter, cf));
    }
    return aggregate_outcomes(a, e);
}

CpnsReport empirical_cpns_risk(std::span<const Sample> current_batch, std::span<const Sample> buffer_batch,
                               const ExpandableModel& model, const CounterfactualConfig& cf) {
    if (current_batch.empty()) {
        throw InputError("empty current batch for intra scope");
    }
    const auto intra = intra_points(current_batch, model);
    std::vector<InterPoint> inter;
    if (model.current_task() > 0) {
        if (buffer_batch.empty()) {
            throw InputError("empty buffer batch for inter scope");
        }
        inter = inter_points(buffer_batch, model);
    }
    return report_from_points(intra, inter, model.intra(), model.inter(), cf);
}

std::pair<double, double> monotonicity_violation(std::span<const Sample> current_batch,
                                                 std::span<const Sample> buffer_batch, const ExpandableModel& model,
                                                 const CounterfactualConfig& cf) {
    const CpnsReport r = empirical_cpns_risk(current_batch, buffer_batch, model, cf);
    return {r.m_intra, r.m_inter};
}

bool check_proposition1(const CpnsReport& report) {
    return report.m_total <= report.r_total && report.m_intra <= report.r_intra && report.m_inter <= report.r_inter;
}

void assert_proposition1(const CpnsReport& report) {
    if (!check_proposition1(report)) {
        throw InvariantViolation("monotonicity violation exceeds CPNS risk: M=" + std::to_string(report.m_total) +
                                 " R=" + std::to_string(report.r_total));
    }
}

double estimate_pns_interventional(std::span<const Sample> eval_set, const ExpandableModel& model, Scope scope,
                                   const CounterfactualConfig& cf) {
    if (eval_set.empty()) {
        throw InputError("empty evaluation set");
    }
    std::vector<SampleOutcome> outcomes;
    outcomes.reserve(eval_set.size());
    if (scope == Scope::Intra) {
        for (const IntraPoint& p : intra_points(eval_set, model)) {
            outcomes.push_back(intra_outcome(p, model.intra(), cf));
        }
    } else {
        for (const InterPoint& p : inter_points(eval_set, model)) {
            outcomes.push_back(inter_outcome(p, model.inter(), cf));
        }
    }
    return tally(outcomes).pns;
}

NodeRef straight_through(Graph& g, NodeRef factual, std::span<const double> delta) {
    return g.add(factual, g.constant(delta));
}

NodeRef surrogate_intra_loss(Graph& g, NodeRef factual, NodeRef counterfactual, std::size_t label,
                             LinearHead& w_intra, bool train_head, double nu) {
    const NodeRef ce = g.softmax_cross_entropy(w_intra.forward(g, factual, train_head), label);
    if (nu == 0.0) {
        return ce;
    }
    const NodeRef nec = g.neg_log_complement(w_intra.forward(g, counterfactual, train_head), label);
    return g.add(ce, g.scale(nec, nu));
}

NodeRef surrogate_inter_loss(Graph& g, ExpandableModel& model, NodeRef z_factual, NodeRef z_counterfactual,
                             std::size_t label, bool train_head, double nu) {
    if (model.current_task() == 0) {
        throw UsageError("inter surrogate is undefined for the first task");
    }
    LinearHead& head = model.inter();
    const NodeRef ce = g.softmax_cross_entropy(head.forward(g, z_factual, train_head), label);
    if (nu == 0.0) {
        return ce;
    }
    const NodeRef nec = g.neg_log_complement(head.forward(g, z_counterfactual, train_head), label);
    return g.add(ce, g.scale(nec, nu));
}

double surrogate_intra_value(std::span<const double> factual, std::span<const double> counterfactual,
                             std::size_t label, const LinearHead& w_intra, double nu) {
    return surrogate_value(w_intra, factual, counterfactual, label, nu);
}

double surrogate_inter_value(const ExpandableModel& model, std::span<const double> z_factual,
                             std::span<const double> z_counterfactual, std::size_t label, double nu) {
    if (model.current_task() == 0) {
        throw UsageError("inter surrogate is undefined for the first task");
    }
    return surrogate_value(model.inter(), z_factual, z_counterfactual, label, nu);
}

} // namespace cpns
