// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/model.hpp"

#include "cpns/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cpns {

namespace {

constexpr const char* kCheckpointMagic = "CPNSLAB1";

void relu_inplace(Vector& v) {
    for (double& x : v) {
        if (!(x > 0.0)) {
            x = 0.0;
        }
    }
}

std::string format_hex(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
    return std::string(buf, res.ptr);
}

double parse_hex(const std::string& s) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    bool negative = false;
    if (first != last && *first == '-') {
        negative = true;
        ++first;
    }
    auto res = std::from_chars(first, last, v, std::chars_format::hex);
    if (res.ec != std::errc() || res.ptr != last) {
        throw FormatError("checkpoint: bad number '" + s + "'");
    }
    return negative ? -v : v;
}

} // namespace

void ModelConfig::validate() const {
    if (input_dim == 0 || feature_dim == 0) {
        throw ConfigError("model: input_dim and feature_dim must be positive");
    }
    for (std::size_t h : hidden) {
        if (h == 0) {
            throw ConfigError("model: hidden widths must be positive");
        }
    }
}

void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values) {
        v = dist(rng);
    }
}

// ---------------------------------------------------------------- Mlp

Mlp::Mlp(std::vector<std::size_t> layer_dims, bool output_relu, Rng& rng)
    : dims_(std::move(layer_dims)), output_relu_(output_relu) {
    if (dims_.size() < 2) {
        throw ConfigError("mlp: need at least input and output widths");
    }
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        Tensor& w = params_.add("W" + std::to_string(l), {dims_[l + 1], dims_[l]});
        Tensor& b = params_.add("b" + std::to_string(l), {dims_[l + 1]});
        init_uniform(w, dims_[l], rng);
        init_uniform(b, dims_[l], rng);
    }
}

void Mlp::set_frozen(bool frozen) {
    frozen_ = frozen;
    params_.set_frozen(frozen);
}

NodeRef Mlp::forward(Graph& g, NodeRef x, bool trainable) {
    NodeRef h = x;
    for (std::size_t l = 0; l < layer_count(); ++l) {
        Tensor& w = params_.at("W" + std::to_string(l));
        Tensor& b = params_.at("b" + std::to_string(l));
        const bool train = trainable && !frozen_;
        NodeRef wn = train ? g.parameter(w) : g.frozen(w);
        NodeRef bn = train ? g.parameter(b) : g.frozen(b);
        h = g.linear(h, wn, bn);
        if (l + 1 < layer_count() || output_relu_) {
            h = g.relu(h);
        }
    }
    return h;
}

NodeRef Mlp::forward(Graph& g, NodeRef x) const {
    NodeRef h = x;
    for (std::size_t l = 0; l < layer_count(); ++l) {
        h = g.linear(h, g.frozen(params_.at("W" + std::to_string(l))), g.frozen(params_.at("b" + std::to_string(l))));
        if (l + 1 < layer_count() || output_relu_) {
            h = g.relu(h);
        }
    }
    return h;
}

std::vector<Vector> Mlp::activations(std::span<const double> x) const {
    if (x.size() != input_dim()) {
        throw InputError("mlp: input dim " + std::to_string(x.size()) + " != " + std::to_string(input_dim()));
    }
    std::vector<Vector> out;
    out.reserve(layer_count());
    Vector h(x.begin(), x.end());
    for (std::size_t l = 0; l < layer_count(); ++l) {
        const Tensor& w = params_.at("W" + std::to_string(l));
        const Tensor& b = params_.at("b" + std::to_string(l));
        Vector next(w.rows());
        kernels::affine(w.values, w.rows(), w.cols(), b.values, h, next);
        if (l + 1 < layer_count() || output_relu_) {
            relu_inplace(next);
        }
        out.push_back(next);
        h = std::move(next);
    }
    return out;
}

Vector Mlp::forward(std::span<const double> x) const { return activations(x).back(); }

// ---------------------------------------------------------------- LinearHead

LinearHead::LinearHead(std::size_t out, std::size_t in, Rng& rng) {
    Tensor& w = params_.add("weight", {out, in});
    Tensor& b = params_.add("bias", {out});
    init_uniform(w, in, rng);
    init_uniform(b, in, rng);
}

NodeRef LinearHead::forward(Graph& g, NodeRef x, bool trainable) {
    Tensor& w = weight();
    Tensor& b = bias();
    return g.linear(x, trainable ? g.parameter(w) : g.frozen(w), trainable ? g.parameter(b) : g.frozen(b));
}

NodeRef LinearHead::forward(Graph& g, NodeRef x) const { return g.linear(x, g.frozen(weight()), g.frozen(bias())); }

Vector LinearHead::forward(std::span<const double> x) const {
    const Tensor& w = weight();
    if (x.size() != w.cols()) {
        throw InputError("head: input dim mismatch");
    }
    Vector out(w.rows());
    kernels::affine(w.values, w.rows(), w.cols(), bias().values, x, out);
    return out;
}

// ---------------------------------------------------------------- ExpandableModel

ExpandableModel::ExpandableModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
    config_.validate();
}

std::size_t ExpandableModel::current_task() const {
    if (extractors_.empty()) {
        throw UsageError("model has no extractors yet");
    }
    return extractors_.size() - 1;
}

std::size_t ExpandableModel::total_classes() const {
    return ranges_.empty() ? 0 : ranges_.back().offset + ranges_.back().count;
}

std::size_t ExpandableModel::current_class_count() const { return current_range().count; }

const ClassRange& ExpandableModel::current_range() const {
    if (ranges_.empty()) {
        throw UsageError("model has no tasks yet");
    }
    return ranges_.back();
}

std::size_t ExpandableModel::task_of(std::size_t label) const {
    for (std::size_t t = 0; t < ranges_.size(); ++t) {
        if (ranges_[t].contains(label)) {
            return t;
        }
    }
    throw InputError("label " + std::to_string(label) + " not owned by any task");
}

FeatureExtractor& ExpandableModel::current_extractor() { return extractors_.at(current_task()); }
const FeatureExtractor& ExpandableModel::current_extractor() const { return extractors_.at(current_task()); }

LinearHead& ExpandableModel::aux() {
    if (!aux_) {
        throw UsageError("auxiliary head is inactive at t = 0");
    }
    return *aux_;
}

const LinearHead& ExpandableModel::aux() const {
    if (!aux_) {
        throw UsageError("auxiliary head is inactive at t = 0");
    }
    return *aux_;
}

Mlp& ExpandableModel::projector() {
    if (!projector_) {
        throw UsageError("projector is undefined at t = 0");
    }
    return *projector_;
}

const Mlp& ExpandableModel::projector() const {
    if (!projector_) {
        throw UsageError("projector is undefined at t = 0");
    }
    return *projector_;
}

namespace {

/// Widened copy of a classifier: old rows/columns copied, old rows get zero
/// weight on the new feature block, new rows freshly initialized.
LinearHead widen(const LinearHead& old, std::size_t new_rows, std::size_t new_cols, Rng& rng) {
    LinearHead head(new_rows, new_cols, rng);
    const Tensor& ow = old.weight();
    const Tensor& ob = old.bias();
    Tensor& w = head.weight();
    Tensor& b = head.bias();
    for (std::size_t r = 0; r < ow.rows(); ++r) {
        for (std::size_t c = 0; c < new_cols; ++c) {
            w.values[r * new_cols + c] = c < ow.cols() ? ow.values[r * ow.cols() + c] : 0.0;
        }
        b.values[r] = ob.values[r];
    }
    return head;
}

} // namespace

void ExpandableModel::expand(std::size_t new_class_count) {
    if (new_class_count == 0) {
        throw ConfigError("expand: new_class_count must be positive");
    }
    const std::size_t d = config_.feature_dim;
    const std::size_t old_classes = total_classes();

    if (!extractors_.empty()) {
        extractors_.back().net.set_frozen(true);
    }
    std::vector<std::size_t> dims;
    dims.push_back(config_.input_dim);
    dims.insert(dims.end(), config_.hidden.begin(), config_.hidden.end());
    dims.push_back(d);
    extractors_.push_back(FeatureExtractor{Mlp(dims, config_.feature_relu, rng_), extractors_.size()});
    ranges_.push_back(ClassRange{old_classes, new_class_count});

    const std::size_t t = extractors_.size() - 1;
    const std::size_t all_classes = old_classes + new_class_count;
    if (t == 0) {
        cls_ = LinearHead(all_classes, d, rng_);
        if (config_.separate_inter_head) {
            inter_ = LinearHead(all_classes, d, rng_);
        }
    } else {
        cls_ = widen(cls_, all_classes, (t + 1) * d, rng_);
        if (inter_) {
            inter_ = widen(*inter_, all_classes, (t + 1) * d, rng_);
        }
    }
    intra_ = LinearHead(new_class_count, d, rng_);
    if (t >= 1) {
        aux_ = LinearHead(new_class_count + 1, d, rng_);
        const std::size_t width = config_.projector_hidden == 0 ? d : config_.projector_hidden;
        projector_ = Mlp({t * d, width, d}, false, rng_);
    } else {
        aux_.reset();
        projector_.reset();
    }
}

void ExpandableModel::check_input(std::span<const double> x) const {
    if (extractors_.empty()) {
        throw UsageError("model has no extractors yet");
    }
    if (x.size() != config_.input_dim) {
        throw InputError("input dim " + std::to_string(x.size()) + " != " + std::to_string(config_.input_dim));
    }
}

Vector ExpandableModel::features(std::size_t extractor_index, std::span<const double> x) const {
    check_input(x);
    return extractors_.at(extractor_index).net.forward(x);
}

Vector ExpandableModel::old_features(std::span<const double> x) const {
    check_input(x);
    Vector out;
    for (std::size_t j = 0; j + 1 < extractors_.size(); ++j) {
        Vector f = extractors_[j].net.forward(x);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

Vector ExpandableModel::concat_features(std::span<const double> x) const {
    check_input(x);
    Vector out;
    for (const auto& e : extractors_) {
        Vector f = e.net.forward(x);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

Vector ExpandableModel::forward_concat(std::span<const double> x) const { return cls_.forward(concat_features(x)); }

Vector ExpandableModel::forward_aux(std::span<const double> x) const {
    check_input(x);
    return aux().forward(current_extractor().net.forward(x));
}

Vector ExpandableModel::forward_intra(std::span<const double> x) const {
    check_input(x);
    return intra_.forward(current_extractor().net.forward(x));
}

Vector ExpandableModel::project_old(std::span<const double> x) const {
    check_input(x);
    const Mlp& p = projector();
    return p.forward(old_features(x));
}

std::vector<std::pair<std::string, Tensor*>> ExpandableModel::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_set = [&](const std::string& prefix, ParameterSet& ps) {
        for (auto& [name, t] : ps) {
            out.emplace_back(prefix + "." + name, &t);
        }
    };
    for (std::size_t j = 0; j < extractors_.size(); ++j) {
        add_set("extractor." + std::to_string(j), extractors_[j].net.params());
    }
    add_set("cls", cls_.params());
    if (aux_) {
        add_set("aux", aux_->params());
    }
    add_set("intra", intra_.params());
    if (inter_) {
        add_set("inter", inter_->params());
    }
    if (projector_) {
        add_set("projector", projector_->params());
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ExpandableModel::named_tensors() const {
    auto mutable_list = const_cast<ExpandableModel*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mutable_list.size());
    for (auto& [name, t] : mutable_list) {
        out.emplace_back(name, t);
    }
    return out;
}

std::vector<Tensor*> ExpandableModel::trainable_tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_tensors()) {
        if (!t->frozen) {
            out.push_back(t);
        }
    }
    return out;
}

void ExpandableModel::zero_grad() {
    for (auto& [name, t] : named_tensors()) {
        t->zero_grad();
    }
}

// ---------------------------------------------------------------- checkpoint

void ExpandableModel::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open checkpoint for writing: " + path.string());
    }
    out << kCheckpointMagic << '\n';
    out << "input_dim " << config_.input_dim << '\n';
    out << "hidden " << config_.hidden.size();
    for (std::size_t h : config_.hidden) {
        out << ' ' << h;
    }
    out << '\n';
    out << "feature_dim " << config_.feature_dim << '\n';
    out << "feature_relu " << (config_.feature_relu ? 1 : 0) << '\n';
    out << "projector_hidden " << config_.projector_hidden << '\n';
    out << "separate_inter_head " << (config_.separate_inter_head ? 1 : 0) << '\n';
    out << "ranges " << ranges_.size();
    for (const auto& r : ranges_) {
        out << ' ' << r.offset << ' ' << r.count;
    }
    out << '\n';
    out << "rng " << rng_ << '\n';
    const auto tensors = named_tensors();
    out << "tensors " << tensors.size() << '\n';
    for (const auto& [name, t] : tensors) {
        out << "tensor " << name << ' ' << (t->frozen ? 1 : 0) << ' ' << t->shape.size();
        for (std::size_t s : t->shape) {
            out << ' ' << s;
        }
        out << '\n';
        for (std::size_t i = 0; i < t->values.size(); ++i) {
            out << (i ? " " : "") << format_hex(t->values[i]);
        }
        out << '\n';
    }
    out << "end\n";
    if (!out) {
        throw FormatError("failed writing checkpoint: " + path.string());
    }
}

ExpandableModel ExpandableModel::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open checkpoint: " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != kCheckpointMagic) {
        throw FormatError("checkpoint: bad magic, expected " + std::string(kCheckpointMagic));
    }
    auto expect_key = [&](const std::string& key) -> std::istringstream {
        if (!std::getline(in, line)) {
            throw FormatError("checkpoint: truncated before '" + key + "'");
        }
        std::istringstream ls(line);
        std::string k;
        ls >> k;
        if (k != key) {
            throw FormatError("checkpoint: expected '" + key + "', found '" + k + "'");
        }
        return ls;
    };

    ModelConfig cfg;
    expect_key("input_dim") >> cfg.input_dim;
    {
        auto ls = expect_key("hidden");
        std::size_t n = 0;
        ls >> n;
        cfg.hidden.assign(n, 0);
        for (auto& h : cfg.hidden) {
            ls >> h;
        }
    }
    expect_key("feature_dim") >> cfg.feature_dim;
    int flag = 0;
    expect_key("feature_relu") >> flag;
    cfg.feature_relu = flag != 0;
    expect_key("projector_hidden") >> cfg.projector_hidden;
    expect_key("separate_inter_head") >> flag;
    cfg.separate_inter_head = flag != 0;

    std::vector<ClassRange> ranges;
    {
        auto ls = expect_key("ranges");
        std::size_t n = 0;
        ls >> n;
        ranges.resize(n);
        for (auto& r : ranges) {
            ls >> r.offset >> r.count;
        }
        if (!ls) {
            throw FormatError("checkpoint: malformed ranges");
        }
    }

    // Rebuild the structure with a throwaway RNG, then overwrite every tensor.
    ExpandableModel model(cfg, 0);
    for (const auto& r : ranges) {
        model.expand(r.count);
    }
    {
        auto ls = expect_key("rng");
        ls >> model.rng_;
        if (!ls) {
            throw FormatError("checkpoint: malformed rng state");
        }
    }
    std::size_t count = 0;
    expect_key("tensors") >> count;
    auto tensors = model.named_tensors();
    if (count != tensors.size()) {
        throw FormatError("checkpoint: tensor count " + std::to_string(count) + " does not match structure (" +
                          std::to_string(tensors.size()) + ")");
    }
    for (auto& [name, t] : tensors) {
        auto ls = expect_key("tensor");
        std::string stored_name;
        int frozen = 0;
        std::size_t rank = 0;
        ls >> stored_name >> frozen >> rank;
        std::vector<std::size_t> shape(rank);
        for (auto& s : shape) {
            ls >> s;
        }
        if (stored_name != name || shape != t->shape) {
            throw FormatError("checkpoint: tensor '" + stored_name + "' does not match expected '" + name + "'");
        }
        t->frozen = frozen != 0;
        if (!std::getline(in, line)) {
            throw FormatError("checkpoint: missing values for " + name);
        }
        std::istringstream vs(line);
        std::string tok;
        for (double& v : t->values) {
            if (!(vs >> tok)) {
                throw FormatError("checkpoint: too few values for " + name);
            }
            v = parse_hex(tok);
        }
    }
    for (std::size_t j = 0; j < model.extractors_.size(); ++j) {
        auto& net = model.extractors_[j].net;
        net.set_frozen(net.params().at("W0").frozen);
    }
    expect_key("end");
    return model;
}

} // namespace cpns
