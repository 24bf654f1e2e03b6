// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/task_data.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace cpns {

// ---------------------------------------------------------------- basics

void Dataset::validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].x.size() != dims) {
            throw InputError("sample " + std::to_string(i) + " has " + std::to_string(samples[i].x.size()) +
                             " features, expected " + std::to_string(dims));
        }
        if (samples[i].label >= classes) {
            throw InputError("sample " + std::to_string(i) + " label " + std::to_string(samples[i].label) +
                             " >= classes " + std::to_string(classes));
        }
    }
}

const char* to_string(FactorTag tag) {
    switch (tag) {
    case FactorTag::Causal: return "causal";
    case FactorTag::MinimalCausal: return "minimal_causal";
    case FactorTag::Spurious: return "spurious";
    case FactorTag::Noise: return "noise";
    }
    return "?";
}

FactorTag parse_factor_tag(const std::string& s) {
    if (s == "causal") return FactorTag::Causal;
    if (s == "minimal_causal") return FactorTag::MinimalCausal;
    if (s == "spurious") return FactorTag::Spurious;
    if (s == "noise") return FactorTag::Noise;
    throw FormatError("unknown factor tag: " + s);
}

std::size_t TaskStream::total_classes() const {
    std::size_t n = 0;
    for (const auto& t : tasks) {
        n = std::max(n, t.range.offset + t.range.count);
    }
    return n;
}

void TaskStream::validate() const {
    for (std::size_t a = 0; a < tasks.size(); ++a) {
        const auto& ra = tasks[a].range;
        if (ra.count == 0) {
            throw InputError("task " + std::to_string(a) + " has no classes");
        }
        for (std::size_t b = a + 1; b < tasks.size(); ++b) {
            const auto& rb = tasks[b].range;
            const bool disjoint = ra.offset + ra.count <= rb.offset || rb.offset + rb.count <= ra.offset;
            if (!disjoint) {
                throw InputError("label ranges of tasks " + std::to_string(a) + " and " + std::to_string(b) +
                                 " overlap");
            }
        }
        for (const Dataset* d : {&tasks[a].train, &tasks[a].test}) {
            if (d->dims != input_dim) {
                throw InputError("task " + std::to_string(a) + " has wrong input dimension");
            }
            d->validate();
            for (const auto& s : d->samples) {
                if (!ra.contains(s.label)) {
                    throw InputError("task " + std::to_string(a) + " holds label " + std::to_string(s.label) +
                                     " outside its range");
                }
            }
        }
    }
}

Dataset merged_test(const TaskStream& stream, std::size_t upto) {
    Dataset out;
    out.dims = stream.input_dim;
    for (std::size_t t = 0; t <= upto && t < stream.tasks.size(); ++t) {
        const auto& test = stream.tasks[t].test;
        out.samples.insert(out.samples.end(), test.samples.begin(), test.samples.end());
        out.classes = std::max(out.classes, stream.tasks[t].range.offset + stream.tasks[t].range.count);
    }
    return out;
}

// ---------------------------------------------------------------- SCM generator

void SyntheticScmConfig::validate() const {
    if (classes_per_task == 0 || num_tasks == 0) {
        throw ConfigError("scm: classes_per_task and num_tasks must be positive");
    }
    if (!(d_mc < d_c)) {
        throw ConfigError("scm: d_mc must be smaller than d_c");
    }
    if (d_c > input_dim) {
        throw ConfigError("scm: d_c exceeds input_dim");
    }
    if (rotation_dims == 0) {
        throw ConfigError("scm: rotation_dims must be >= 1");
    }
    if (!(overlap >= 0.0 && overlap <= 1.0)) {
        throw ConfigError("scm: overlap must lie in [0, 1]");
    }
    if (!(spurious_strength >= 0.0 && spurious_strength <= 1.0)) {
        throw ConfigError("scm: spurious_strength must lie in [0, 1]");
    }
    if (noise_sigma < 0.0 || factor_sigma < 0.0) {
        throw ConfigError("scm: noise levels must be non-negative");
    }
    if (d_c * classes_per_task * rotation_dims + d_s > input_dim) {
        throw ConfigError("scm: infeasible geometry, d_c * classes_per_task * rotation_dims + d_s = " +
                          std::to_string(d_c * classes_per_task * rotation_dims + d_s) + " exceeds input_dim " +
                          std::to_string(input_dim));
    }
    if (rotation_dims == 1 && overlap < 1.0 && num_tasks > 1) {
        throw ConfigError("scm: overlap < 1 needs rotation_dims >= 2");
    }
    if (train_per_class == 0 || test_per_class == 0) {
        throw ConfigError("scm: per-class sample counts must be positive");
    }
}

namespace {

Vector gaussian_vector(std::size_t n, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(n);
    for (double& x : v) {
        x = normal(rng);
    }
    return v;
}

/// Random unit vector orthogonal to every vector in `basis` (assumed
/// orthonormal).
Vector random_orthogonal_unit(std::size_t n, const std::vector<Vector>& basis, Rng& rng) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        Vector v = gaussian_vector(n, rng);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double p = kernels::dot(v, b);
                for (std::size_t i = 0; i < n; ++i) {
                    v[i] -= p * b[i];
                }
            }
        }
        const double nv = kernels::norm(v);
        if (nv > 1e-6) {
            for (double& x : v) {
                x /= nv;
            }
            return v;
        }
    }
    throw ConfigError("scm: could not draw an orthogonal direction");
}

/// Chain of unit vectors in R^r with consecutive dot product exactly `overlap`.
/// Each new step is orthogonal to as many recent directions as fit.
std::vector<Vector> rotation_chain(std::size_t r, std::size_t length, double overlap, Rng& rng) {
    std::vector<Vector> chain;
    chain.push_back(random_orthogonal_unit(r, {}, rng));
    const double s = std::sqrt(std::max(0.0, 1.0 - overlap * overlap));
    for (std::size_t t = 1; t < length; ++t) {
        // Orthonormal basis of the most recent directions, newest first.
        std::vector<Vector> basis;
        for (std::size_t back = 0; back < std::min(r - 1, chain.size()); ++back) {
            Vector v = chain[chain.size() - 1 - back];
            for (const auto& b : basis) {
                const double p = kernels::dot(v, b);
                for (std::size_t i = 0; i < r; ++i) {
                    v[i] -= p * b[i];
                }
            }
            const double nv = kernels::norm(v);
            if (nv < 1e-9) {
                continue;
            }
            for (double& x : v) {
                x /= nv;
            }
            basis.push_back(std::move(v));
        }
        Vector next(r, 0.0);
        if (s > 0.0) {
            const Vector w = random_orthogonal_unit(r, basis, rng);
            for (std::size_t i = 0; i < r; ++i) {
                next[i] = overlap * chain.back()[i] + s * w[i];
            }
        } else {
            next = chain.back();
        }
        const double n = kernels::norm(next);
        for (double& x : next) {
            x /= n;
        }
        chain.push_back(std::move(next));
    }
    return chain;
}

} // namespace

TaskStream gen_scm_stream(const SyntheticScmConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t k_classes = cfg.classes_per_task;
    const std::size_t r = cfg.rotation_dims;
    const std::size_t causal_dims = cfg.d_c * k_classes * r;
    const std::size_t spurious_offset = causal_dims;
    const std::size_t total_classes = k_classes * cfg.num_tasks;

    // chains[j][k][t]: direction of factor k of class slot j in task t.
    std::vector<std::vector<std::vector<Vector>>> chains(k_classes);
    for (std::size_t j = 0; j < k_classes; ++j) {
        for (std::size_t k = 0; k < cfg.d_c; ++k) {
            chains[j].push_back(rotation_chain(r, cfg.num_tasks, cfg.overlap, rng));
        }
    }
    auto block_start = [&](std::size_t j, std::size_t k) { return (j * cfg.d_c + k) * r; };
    auto margin = [&](std::size_t k) { return k < cfg.d_mc ? cfg.minimal_margin : cfg.causal_margin; };

    FactorAnnotations ann;
    ann.dim_tags.assign(cfg.input_dim, FactorTag::Noise);
    for (std::size_t j = 0; j < k_classes; ++j) {
        for (std::size_t k = 0; k < cfg.d_c; ++k) {
            for (std::size_t i = 0; i < r; ++i) {
                ann.dim_tags[block_start(j, k) + i] = k < cfg.d_mc ? FactorTag::MinimalCausal : FactorTag::Causal;
            }
        }
    }
    for (std::size_t i = 0; i < cfg.d_s; ++i) {
        ann.dim_tags[spurious_offset + i] = FactorTag::Spurious;
    }
    ann.class_causal_dims.resize(total_classes);
    ann.class_minimal_dims.resize(total_classes);
    ann.class_prototypes.assign(total_classes, Vector(cfg.input_dim, 0.0));
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        for (std::size_t j = 0; j < k_classes; ++j) {
            const std::size_t c = t * k_classes + j;
            for (std::size_t k = 0; k < cfg.d_c; ++k) {
                for (std::size_t i = 0; i < r; ++i) {
                    const std::size_t dim = block_start(j, k) + i;
                    ann.class_causal_dims[c].push_back(dim);
                    if (k < cfg.d_mc) {
                        ann.class_minimal_dims[c].push_back(dim);
                    }
                    ann.class_prototypes[c][dim] = margin(k) * chains[j][k][t][i];
                }
            }
        }
    }

    // Spurious codes: orthonormal within a task when d_s allows it.
    std::vector<Vector> codes(total_classes);
    if (cfg.d_s > 0) {
        for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
            std::vector<Vector> basis;
            for (std::size_t j = 0; j < k_classes; ++j) {
                Vector u = basis.size() < cfg.d_s ? random_orthogonal_unit(cfg.d_s, basis, rng)
                                                  : random_orthogonal_unit(cfg.d_s, {}, rng);
                if (basis.size() < cfg.d_s) {
                    basis.push_back(u);
                }
                for (double& x : u) {
                    x *= cfg.spurious_margin;
                }
                codes[t * k_classes + j] = std::move(u);
            }
        }
    }

    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, k_classes - 1);
    auto draw = [&](std::size_t t, std::size_t j, bool train) {
        Sample s;
        s.label = t * k_classes + j;
        s.x.assign(cfg.input_dim, 0.0);
        for (double& v : s.x) {
            v = cfg.noise_sigma * normal(rng);
        }
        for (std::size_t k = 0; k < cfg.d_c; ++k) {
            const double a = margin(k) + cfg.factor_sigma * normal(rng);
            for (std::size_t i = 0; i < r; ++i) {
                s.x[block_start(j, k) + i] += a * chains[j][k][t][i];
            }
        }
        if (cfg.d_s > 0) {
            // Bernoulli gate decides alignment; otherwise an independent draw.
            const bool aligned = train && unit(rng) < cfg.spurious_strength;
            const std::size_t code_slot = aligned ? j : pick(rng);
            const Vector& code = codes[t * k_classes + code_slot];
            for (std::size_t i = 0; i < cfg.d_s; ++i) {
                s.x[spurious_offset + i] += code[i];
            }
        }
        return s;
    };

    TaskStream stream;
    stream.input_dim = cfg.input_dim;
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        Task task;
        task.range = ClassRange{t * k_classes, k_classes};
        for (Dataset* d : {&task.train, &task.test}) {
            d->dims = cfg.input_dim;
            d->classes = (t + 1) * k_classes;
        }
        for (std::size_t j = 0; j < k_classes; ++j) {
            for (std::size_t n = 0; n < cfg.train_per_class; ++n) {
                task.train.samples.push_back(draw(t, j, true));
            }
        }
        for (std::size_t j = 0; j < k_classes; ++j) {
            for (std::size_t n = 0; n < cfg.test_per_class; ++n) {
                task.test.samples.push_back(draw(t, j, false));
            }
        }
        stream.tasks.push_back(std::move(task));
    }
    stream.factors = std::move(ann);
    stream.validate();
    return stream;
}

// ---------------------------------------------------------------- B-I split

std::size_t split_task_count(std::size_t classes, std::size_t base, std::size_t increment) {
    if (base == 0 || increment == 0) {
        throw ConfigError("split: B and I must be positive");
    }
    if (base > classes) {
        throw ConfigError("split: B exceeds the number of classes");
    }
    return 1 + (classes - base) / increment;
}

TaskStream split_tasks(const Dataset& train, const Dataset& test, std::size_t base, std::size_t increment,
                       std::uint64_t seed) {
    const std::size_t classes = std::max(train.classes, test.classes);
    const std::size_t n_tasks = split_task_count(classes, base, increment);
    if (train.dims != test.dims) {
        throw InputError("split: train and test dimensions differ");
    }
    train.validate();
    test.validate();

    std::vector<std::size_t> order(classes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    // new_label[old] for kept classes; SIZE_MAX marks dropped ones.
    std::vector<std::size_t> new_label(classes, SIZE_MAX);
    const std::size_t kept = base + (n_tasks - 1) * increment;
    for (std::size_t i = 0; i < kept; ++i) {
        new_label[order[i]] = i;
    }

    TaskStream stream;
    stream.input_dim = train.dims;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        Task task;
        task.range = t == 0 ? ClassRange{0, base} : ClassRange{base + (t - 1) * increment, increment};
        for (Dataset* d : {&task.train, &task.test}) {
            d->dims = train.dims;
            d->classes = task.range.offset + task.range.count;
        }
        stream.tasks.push_back(std::move(task));
    }
    auto route = [&](const Dataset& src, bool is_train) {
        for (const auto& s : src.samples) {
            const std::size_t nl = new_label[s.label];
            if (nl == SIZE_MAX) {
                continue;
            }
            const std::size_t t = nl < base ? 0 : 1 + (nl - base) / increment;
            Sample copy{s.x, nl};
            (is_train ? stream.tasks[t].train : stream.tasks[t].test).samples.push_back(std::move(copy));
        }
    };
    route(train, true);
    route(test, false);
    stream.validate();
    return stream;
}

// ---------------------------------------------------------------- tabular I/O

namespace {

double parse_double(const std::string& tok, std::size_t line) {
    double v = 0.0;
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    if (first != last && *first == '+') {
        ++first;
    }
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) {
        throw ParseError(line, "non-numeric value '" + tok + "'");
    }
    return v;
}

std::size_t parse_header_field(const std::string& tok, const std::string& key, std::size_t line) {
    if (tok.rfind(key + "=", 0) != 0) {
        throw ParseError(line, "expected '" + key + "=<n>' in header, found '" + tok + "'");
    }
    const std::string num = tok.substr(key.size() + 1);
    std::size_t v = 0;
    auto res = std::from_chars(num.data(), num.data() + num.size(), v);
    if (res.ec != std::errc() || res.ptr != num.data() + num.size()) {
        throw ParseError(line, "bad integer in header field '" + tok + "'");
    }
    return v;
}

} // namespace

Dataset load_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open table: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(1, "empty file");
    }
    Dataset data;
    {
        std::istringstream hs(line);
        std::string magic, version, dims, classes, extra;
        hs >> magic >> version >> dims >> classes;
        if (magic != "cpns-tab" || version != "v1") {
            throw ParseError(1, "header must start with 'cpns-tab v1'");
        }
        data.dims = parse_header_field(dims, "dims", 1);
        data.classes = parse_header_field(classes, "classes", 1);
        if (hs >> extra) {
            throw ParseError(1, "unexpected trailing header field '" + extra + "'");
        }
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        std::size_t label = 0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), label);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
            throw ParseError(line_no, "bad label '" + tok + "'");
        }
        if (label >= data.classes) {
            throw ParseError(line_no, "label " + tok + " out of range for classes=" + std::to_string(data.classes));
        }
        Sample s;
        s.label = label;
        while (ls >> tok) {
            s.x.push_back(parse_double(tok, line_no));
        }
        if (s.x.size() != data.dims) {
            throw FormatError("line " + std::to_string(line_no) + ": expected " + std::to_string(data.dims) +
                              " features, found " + std::to_string(s.x.size()));
        }
        data.samples.push_back(std::move(s));
    }
    return data;
}

void save_table(const Dataset& data, const std::filesystem::path& path) {
    data.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot open table for writing: " + path.string());
    }
    out << "cpns-tab v1 dims=" << data.dims << " classes=" << data.classes << '\n';
    char buf[64];
    for (const auto& s : data.samples) {
        out << s.label;
        for (double v : s.x) {
            // Shortest round-trip decimal representation.
            auto res = std::to_chars(buf, buf + sizeof(buf), v);
            out << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
}

std::vector<FactorTag> load_factors(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open factor sidecar: " + path.string());
    }
    std::vector<FactorTag> tags;
    std::string tok;
    while (in >> tok) {
        tags.push_back(parse_factor_tag(tok));
    }
    return tags;
}

void save_factors(const std::vector<FactorTag>& tags, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    for (std::size_t i = 0; i < tags.size(); ++i) {
        out << to_string(tags[i]) << '\n';
    }
}

} // namespace cpns
