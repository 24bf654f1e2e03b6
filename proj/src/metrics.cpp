// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/metrics.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace cpns {

IncrementalAccuracy incremental_accuracy(std::span<const double> stage_accuracies) {
    if (stage_accuracies.empty()) {
        throw InputError("incremental_accuracy: empty history");
    }
    IncrementalAccuracy r;
    r.last = stage_accuracies.back();
    r.avg = std::accumulate(stage_accuracies.begin(), stage_accuracies.end(), 0.0) /
            static_cast<double>(stage_accuracies.size());
    return r;
}

// ------------------------------------------------------------ old -> new

std::vector<OverlapGroup> group_old_new(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                                        const ClassRange& new_range, std::span<const Vector> prototypes) {
    if (labels.size() != predictions.size()) {
        throw InputError("old_new_error: label and prediction counts differ");
    }
    if (new_range.offset + new_range.count > prototypes.size()) {
        throw InputError("old_new_error: missing prototypes for new classes");
    }
    std::set<std::size_t> old_classes(labels.begin(), labels.end());
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c : old_classes) {
        if (new_range.contains(c) || c >= prototypes.size()) {
            throw InputError("old_new_error: sample label " + std::to_string(c) + " is not an old class");
        }
        double best = -1.0;
        for (std::size_t n = new_range.offset; n < new_range.offset + new_range.count; ++n) {
            best = std::max(best, kernels::cosine(prototypes[c], prototypes[n]));
        }
        ranked.emplace_back(best, c);
    }
    std::sort(ranked.begin(), ranked.end());

    static const char* const names[] = {"low", "medium", "high"};
    std::vector<OverlapGroup> groups(3);
    std::map<std::size_t, std::size_t> group_of;
    const std::size_t n = ranked.size();
    for (std::size_t g = 0; g < 3; ++g) {
        groups[g].name = names[g];
        const std::size_t lo = g * n / 3;
        const std::size_t hi = (g + 1) * n / 3;
        for (std::size_t i = lo; i < hi; ++i) {
            groups[g].classes.push_back(ranked[i].second);
            group_of[ranked[i].second] = g;
        }
        if (hi > lo) {
            groups[g].overlap_min = ranked[lo].first;
            groups[g].overlap_max = ranked[hi - 1].first;
        }
    }
    std::vector<std::size_t> hits(3, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::size_t g = group_of.at(labels[i]);
        ++groups[g].samples;
        if (new_range.contains(predictions[i])) {
            ++hits[g];
        }
    }
    for (std::size_t g = 0; g < 3; ++g) {
        groups[g].rate = groups[g].samples > 0
                             ? static_cast<double>(hits[g]) / static_cast<double>(groups[g].samples)
                             : 0.0;
    }
    return groups;
}

std::vector<OverlapGroup> old_new_error(const ExpandableModel& model, std::span<const Sample> old_test,
                                        const ClassRange& new_range, std::span<const Vector> prototypes) {
    if (model.empty() || model.current_task() == 0) {
        throw UsageError("old_new_error requires t >= 1");
    }
    std::vector<std::size_t> labels;
    std::vector<std::size_t> preds;
    labels.reserve(old_test.size());
    preds.reserve(old_test.size());
    for (const Sample& s : old_test) {
        labels.push_back(s.label);
        preds.push_back(kernels::argmax(model.forward_concat(s.x)));
    }
    return group_old_new(labels, preds, new_range, prototypes);
}

// ------------------------------------------------------------------ CKA

namespace {

/// Column-centred copy as a dense row-major n x d matrix.
std::vector<double> centered(const std::vector<Vector>& m, std::size_t& cols) {
    const std::size_t n = m.size();
    cols = m.front().size();
    std::vector<double> out(n * cols);
    Vector mean(cols, 0.0);
    for (const Vector& row : m) {
        if (row.size() != cols) {
            throw InputError("linear_cka: ragged activation matrix");
        }
        for (std::size_t j = 0; j < cols; ++j) {
            mean[j] += row[j];
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] = m[i][j] - mean[j];
        }
    }
    return out;
}

/// ||A^T B||_F^2 for row-major n x p and n x q matrices.
double cross_frobenius_sq(const std::vector<double>& a, std::size_t p, const std::vector<double>& b, std::size_t q,
                          std::size_t n) {
    std::vector<double> c(p * q, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* ra = &a[i * p];
        const double* rb = &b[i * q];
        for (std::size_t r = 0; r < p; ++r) {
            const double v = ra[r];
            if (v == 0.0) {
                continue;
            }
            double* cr = &c[r * q];
            for (std::size_t s = 0; s < q; ++s) {
                cr[s] += v * rb[s];
            }
        }
    }
    double acc = 0.0;
    for (double v : c) {
        acc += v * v;
    }
    return acc;
}

} // namespace

double linear_cka(const std::vector<Vector>& x, const std::vector<Vector>& y) {
    if (x.size() != y.size()) {
        throw InputError("linear_cka: sample counts differ");
    }
    if (x.size() < 2) {
        throw InputError("linear_cka: need at least 2 samples");
    }
    const std::size_t n = x.size();
    std::size_t p = 0;
    std::size_t q = 0;
    const std::vector<double> a = centered(x, p);
    const std::vector<double> b = centered(y, q);
    const double xx = std::sqrt(cross_frobenius_sq(a, p, a, p, n));
    const double yy = std::sqrt(cross_frobenius_sq(b, q, b, q, n));
    if (xx == 0.0 || yy == 0.0) {
        std::cerr << "warning: linear_cka on a zero-variance input, reporting 0\n";
        return 0.0;
    }
    const double v = cross_frobenius_sq(b, q, a, p, n) / (xx * yy);
    return std::clamp(v, 0.0, 1.0);
}

std::vector<CkaLayer> cka_by_layer(const ExpandableModel& model, std::size_t a, std::size_t b,
                                   std::span<const Sample> inputs) {
    const Mlp& na = model.extractor(a).net;
    const Mlp& nb = model.extractor(b).net;
    const std::size_t layers = na.layer_count();
    std::vector<std::vector<Vector>> acts_a(layers);
    std::vector<std::vector<Vector>> acts_b(layers);
    for (const Sample& s : inputs) {
        std::vector<Vector> ha = na.activations(s.x);
        std::vector<Vector> hb = nb.activations(s.x);
        for (std::size_t l = 0; l < layers; ++l) {
            acts_a[l].push_back(std::move(ha[l]));
            acts_b[l].push_back(std::move(hb[l]));
        }
    }
    std::vector<CkaLayer> out;
    for (std::size_t l = 0; l < layers; ++l) {
        out.push_back({l, 2 * l < layers, linear_cka(acts_a[l], acts_b[l])});
    }
    return out;
}

// -------------------------------------------------------------- masking

Vector input_saliency(const ExpandableModel& model, std::span<const double> x, std::size_t label) {
    if (label >= model.total_classes()) {
        throw InputError("saliency: label out of range");
    }
    Graph g;
    const NodeRef in = g.input(x);
    std::vector<NodeRef> parts;
    for (std::size_t j = 0; j < model.extractor_count(); ++j) {
        parts.push_back(model.extractor(j).net.forward(g, in));
    }
    const NodeRef z = parts.size() == 1 ? parts.front() : g.concat(parts);
    const NodeRef logits = model.cls().forward(g, z);
    Vector pick(model.total_classes(), 0.0);
    pick[label] = 1.0;
    const NodeRef target = g.sum(g.hadamard(logits, g.constant(pick)));
    g.backward(target);
    const auto grad = g.grad_wrt(in);
    Vector out(grad.begin(), grad.end());
    for (double& v : out) {
        v = std::abs(v);
    }
    return out;
}

double average_drop(std::span<const MaskingPoint> points) {
    if (points.size() < 2) {
        return 0.0;
    }
    const double span = static_cast<double>(points.back().k - points.front().k);
    return (points.front().acc - points.back().acc) / span;
}

MaskingCurve masking_curve(const ExpandableModel& model, std::span<const Sample> test,
                           const FactorAnnotations& factors, std::span<const std::size_t> ks) {
    if (test.empty()) {
        throw InputError("masking_curve: empty test set");
    }
    std::vector<std::size_t> levels(ks.begin(), ks.end());
    if (levels.empty() || levels.front() != 0) {
        levels.insert(levels.begin(), 0);
    }
    for (std::size_t i = 1; i < levels.size(); ++i) {
        if (levels[i] <= levels[i - 1]) {
            throw ConfigError("masking_curve: ks must be strictly increasing");
        }
    }
    std::vector<std::vector<std::size_t>> ranking;
    ranking.reserve(test.size());
    for (const Sample& s : test) {
        if (s.label >= factors.class_causal_dims.size()) {
            throw InputError("masking_curve: no annotation for class " + std::to_string(s.label));
        }
        const std::vector<std::size_t>& dims = factors.class_causal_dims[s.label];
        if (levels.back() > dims.size()) {
            throw ConfigError("masking_curve: k=" + std::to_string(levels.back()) + " exceeds the " +
                              std::to_string(dims.size()) + " annotated causal dims");
        }
        const Vector sal = input_saliency(model, s.x, s.label);
        std::vector<std::size_t> order = dims;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return sal[a] > sal[b]; });
        ranking.push_back(std::move(order));
    }
    MaskingCurve curve;
    for (std::size_t k : levels) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            Vector x = test[i].x;
            for (std::size_t r = 0; r < k; ++r) {
                x[ranking[i][r]] = 0.0;
            }
            if (kernels::argmax(model.forward_concat(x)) == test[i].label) {
                ++correct;
            }
        }
        curve.points.push_back({k, static_cast<double>(correct) / static_cast<double>(test.size())});
    }
    curve.avg_drop = average_drop(curve.points);
    return curve;
}

// ---------------------------------------------------- counterfactual quality

CfQuality counterfactual_quality(std::span<const CounterfactualSample> samples, const LinearHead& head,
                                 bool want_hss) {
    if (samples.empty()) {
        throw InputError("counterfactual_quality: no samples");
    }
    CfQuality q;
    q.count = samples.size();
    std::size_t intra = 0;
    std::size_t flips = 0;
    std::size_t inter = 0;
    double hss = 0.0;
    double hss_factual = 0.0;
    for (const CounterfactualSample& s : samples) {
        q.lkld += s.kl_value;
        if (s.scope == Scope::Intra) {
            ++intra;
            if (kernels::argmax(head.forward(s.factual)) != kernels::argmax(head.forward(s.counterfactual))) {
                ++flips;
            }
        } else {
            ++inter;
            hss += kernels::cosine(s.counterfactual, s.reference);
            hss_factual += kernels::cosine(s.factual, s.reference);
        }
    }
    q.lkld /= static_cast<double>(samples.size());
    q.pfr = intra > 0 ? static_cast<double>(flips) / static_cast<double>(intra) : 0.0;
    if (inter > 0) {
        q.hss = hss / static_cast<double>(inter);
        q.hss_factual = hss_factual / static_cast<double>(inter);
    } else if (want_hss) {
        throw UsageError("counterfactual_quality: HSS needs inter-scope samples");
    }
    return q;
}

// ---------------------------------------------------------- wasserstein

double wasserstein_1d(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) {
        throw InputError("wasserstein_1d: empty sample");
    }
    Vector x(a.begin(), a.end());
    Vector y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const std::size_t n = x.size();
    const std::size_t m = y.size();
    if (n == m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += std::abs(x[i] - y[i]);
        }
        return acc / static_cast<double>(n);
    }
    // Walk the merged quantile breakpoints i/n and j/m.
    std::size_t i = 0;
    std::size_t j = 0;
    double u = 0.0;
    double acc = 0.0;
    while (i < n && j < m) {
        const std::size_t ni = (i + 1) * m;
        const std::size_t nj = (j + 1) * n;
        const double next = static_cast<double>(std::min(ni, nj)) / static_cast<double>(n * m);
        acc += (next - u) * std::abs(x[i] - y[j]);
        u = next;
        if (ni <= nj) {
            ++i;
        }
        if (nj <= ni) {
            ++j;
        }
    }
    return acc;
}

double sliced_wasserstein(const std::vector<Vector>& a, const std::vector<Vector>& b) {
    if (a.empty() || b.empty()) {
        throw InputError("sliced_wasserstein: empty sample");
    }
    const std::size_t d = a.front().size();
    if (d == 0 || b.front().size() != d) {
        throw InputError("sliced_wasserstein: dimension mismatch");
    }
    double acc = 0.0;
    Vector ca(a.size());
    Vector cb(b.size());
    for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            ca[i] = a[i].at(k);
        }
        for (std::size_t i = 0; i < b.size(); ++i) {
            cb[i] = b[i].at(k);
        }
        acc += wasserstein_1d(ca, cb);
    }
    return acc / static_cast<double>(d);
}

// ---------------------------------------------------------------- output

void to_json(nlohmann::json& j, const OverlapGroup& g) {
    j = nlohmann::json{{"group", g.name},       {"overlap_min", g.overlap_min}, {"overlap_max", g.overlap_max},
                       {"classes", g.classes}, {"samples", g.samples},         {"rate", g.rate}};
}

void to_json(nlohmann::json& j, const CkaLayer& c) {
    j = nlohmann::json{{"layer", c.layer}, {"depth", c.shallow ? "shallow" : "deep"}, {"value", c.value}};
}

void to_json(nlohmann::json& j, const MaskingCurve& m) {
    nlohmann::json pts = nlohmann::json::array();
    for (const MaskingPoint& p : m.points) {
        pts.push_back({{"k", p.k}, {"acc", p.acc}});
    }
    j = nlohmann::json{{"points", pts}, {"avg_drop", m.avg_drop}};
}

void to_json(nlohmann::json& j, const CfQuality& q) {
    j = nlohmann::json{{"pfr", q.pfr}, {"lkld", q.lkld}, {"count", q.count}};
    j["hss"] = q.hss ? nlohmann::json(*q.hss) : nlohmann::json(nullptr);
    j["hss_factual"] = q.hss_factual ? nlohmann::json(*q.hss_factual) : nlohmann::json(nullptr);
}

void to_json(nlohmann::json& j, const EvalRecord& r) {
    j = nlohmann::json{{"task_index", r.task_index},
                       {"task_accuracies", r.task_accuracies},
                       {"last_acc", r.last_acc},
                       {"avg_acc", r.avg_acc},
                       {"old_new_errors", r.old_new_errors},
                       {"cka_by_layer", r.cka_by_layer},
                       {"cpns_report", r.cpns_report}};
    j["masking_curve"] = r.masking_curve ? nlohmann::json(*r.masking_curve) : nlohmann::json(nullptr);
    j["cf_quality"] = r.cf_quality ? nlohmann::json(*r.cf_quality) : nlohmann::json(nullptr);
}

void write_eval_record(const EvalRecord& record, const std::filesystem::path& path) {
    assert_proposition1(record.cpns_report);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << nlohmann::json(record).dump(2) << '\n';
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_summary_csv(std::span<const SummaryRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << kSummaryHeader << '\n';
    for (const SummaryRow& r : rows) {
        out << r.method << ',' << r.scenario << ',' << r.seed << ',' << format_double(r.last) << ','
            << format_double(r.avg) << '\n';
    }
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != kSummaryHeader) {
        throw FormatError("unexpected summary header in " + path.string());
    }
    std::vector<SummaryRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() != 5) {
            throw ParseError(line_no, "expected 5 columns");
        }
        SummaryRow r;
        r.method = cells[0];
        r.scenario = cells[1];
        try {
            r.seed = std::stoull(cells[2]);
            r.last = std::stod(cells[3]);
            r.avg = std::stod(cells[4]);
        } catch (const std::exception&) {
            throw ParseError(line_no, "non-numeric summary cell");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace cpns
