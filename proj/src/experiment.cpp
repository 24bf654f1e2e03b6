// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpns/experiment.hpp"

#include "cpns/errors.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

namespace cpns {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
            throw ConfigError("unknown key in " + where + ": " + key);
        }
    }
}

SyntheticScmConfig parse_scm(const nlohmann::json& j) {
    reject_unknown(j,
                   {"classes_per_task", "num_tasks", "d_c", "d_s", "d_mc", "overlap", "spurious_strength",
                    "noise_sigma", "input_dim", "seed", "train_per_class", "test_per_class", "rotation_dims",
                    "minimal_margin", "causal_margin", "factor_sigma", "spurious_margin"},
                   "data.scm");
    SyntheticScmConfig c;
    c.classes_per_task = j.value("classes_per_task", c.classes_per_task);
    c.num_tasks = j.value("num_tasks", c.num_tasks);
    c.d_c = j.value("d_c", c.d_c);
    c.d_s = j.value("d_s", c.d_s);
    c.d_mc = j.value("d_mc", c.d_mc);
    c.overlap = j.value("overlap", c.overlap);
    c.spurious_strength = j.value("spurious_strength", c.spurious_strength);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.seed = j.value("seed", c.seed);
    c.train_per_class = j.value("train_per_class", c.train_per_class);
    c.test_per_class = j.value("test_per_class", c.test_per_class);
    c.rotation_dims = j.value("rotation_dims", c.rotation_dims);
    c.minimal_margin = j.value("minimal_margin", c.minimal_margin);
    c.causal_margin = j.value("causal_margin", c.causal_margin);
    c.factor_sigma = j.value("factor_sigma", c.factor_sigma);
    c.spurious_margin = j.value("spurious_margin", c.spurious_margin);
    return c;
}

nlohmann::json scm_json(const SyntheticScmConfig& c) {
    return {{"classes_per_task", c.classes_per_task},
            {"num_tasks", c.num_tasks},
            {"d_c", c.d_c},
            {"d_s", c.d_s},
            {"d_mc", c.d_mc},
            {"overlap", c.overlap},
            {"spurious_strength", c.spurious_strength},
            {"noise_sigma", c.noise_sigma},
            {"input_dim", c.input_dim},
            {"seed", c.seed},
            {"train_per_class", c.train_per_class},
            {"test_per_class", c.test_per_class},
            {"rotation_dims", c.rotation_dims},
            {"minimal_margin", c.minimal_margin},
            {"causal_margin", c.causal_margin},
            {"factor_sigma", c.factor_sigma},
            {"spurious_margin", c.spurious_margin}};
}

ModelConfig parse_model(const nlohmann::json& j) {
    reject_unknown(j, {"input_dim", "hidden", "feature_dim", "feature_relu", "projector_hidden", "separate_inter_head"},
                   "model");
    ModelConfig c;
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.feature_relu = j.value("feature_relu", c.feature_relu);
    c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
    c.separate_inter_head = j.value("separate_inter_head", c.separate_inter_head);
    return c;
}

nlohmann::json model_json(const ModelConfig& c) {
    return {{"input_dim", c.input_dim},
            {"hidden", c.hidden},
            {"feature_dim", c.feature_dim},
            {"feature_relu", c.feature_relu},
            {"projector_hidden", c.projector_hidden},
            {"separate_inter_head", c.separate_inter_head}};
}

MetricsToggles parse_metrics(const nlohmann::json& j) {
    reject_unknown(j, {"old_new_error", "cka", "masking", "masking_ks", "cf_quality", "eval_samples", "checkpoints"},
                   "metrics");
    MetricsToggles m;
    m.old_new_error = j.value("old_new_error", m.old_new_error);
    m.cka = j.value("cka", m.cka);
    m.masking = j.value("masking", m.masking);
    m.masking_ks = j.value("masking_ks", m.masking_ks);
    m.cf_quality = j.value("cf_quality", m.cf_quality);
    m.eval_samples = j.value("eval_samples", m.eval_samples);
    m.checkpoints = j.value("checkpoints", m.checkpoints);
    return m;
}

nlohmann::json metrics_json(const MetricsToggles& m) {
    return {{"old_new_error", m.old_new_error}, {"cka", m.cka},
            {"masking", m.masking},             {"masking_ks", m.masking_ks},
            {"cf_quality", m.cf_quality},       {"eval_samples", m.eval_samples},
            {"checkpoints", m.checkpoints}};
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) {
        return p;
    }
    return base / p;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

template <typename T>
T get_checked(const nlohmann::json& j, const char* key, const T& fallback) {
    try {
        return j.value(key, fallback);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
}

} // namespace

void ExperimentConfig::validate() const {
    if (seeds.empty()) {
        throw ConfigError("config: seed list is empty");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("config: duplicate seeds");
    }
    if (run_id.empty() || run_id.find('/') != std::string::npos) {
        throw ConfigError("config: run_id must be a non-empty path component");
    }
    if (method.find(',') != std::string::npos || scenario.find(',') != std::string::npos) {
        throw ConfigError("config: method and scenario must not contain commas");
    }
    if (data.kind == DataSpec::Kind::Scm) {
        data.scm.validate();
    } else {
        for (const fs::path& p : {data.train_path, data.test_path}) {
            if (p.empty() || !fs::exists(p)) {
                throw ConfigError("config: data file not found: " + p.string());
            }
        }
        if (!data.factors_path.empty() && !fs::exists(data.factors_path)) {
            throw ConfigError("config: factors file not found: " + data.factors_path.string());
        }
        if (data.base == 0 || data.increment == 0) {
            throw ConfigError("config: table data needs base and increment >= 1");
        }
    }
    model.validate();
    train.validate();
    for (std::size_t i = 1; i < metrics.masking_ks.size(); ++i) {
        if (metrics.masking_ks[i] <= metrics.masking_ks[i - 1]) {
            throw ConfigError("config: metrics.masking_ks must be strictly increasing");
        }
    }
    if (metrics.eval_samples == 0) {
        throw ConfigError("config: metrics.eval_samples must be >= 1");
    }
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j, const fs::path& base_dir) {
    reject_unknown(j, {"run_id", "method", "scenario", "method_path", "output_dir", "seeds", "data", "model", "train",
                       "metrics"},
                   "config");
    ExperimentConfig c;
    c.run_id = get_checked(j, "run_id", c.run_id);
    c.method = get_checked(j, "method", c.method);
    c.scenario = get_checked(j, "scenario", c.scenario);
    const std::string path = get_checked(j, "method_path", std::string("cpns"));
    if (path == "cpns") {
        c.path = MethodPath::Cpns;
    } else if (path == "baseline") {
        c.path = MethodPath::Baseline;
    } else {
        throw ConfigError("config: method_path must be \"cpns\" or \"baseline\"");
    }
    c.output_dir = get_checked(j, "output_dir", c.output_dir.string());
    c.seeds = get_checked(j, "seeds", c.seeds);
    try {
        if (j.contains("data")) {
            const nlohmann::json& d = j.at("data");
            reject_unknown(d, {"kind", "scm", "train", "test", "factors", "base", "increment"}, "data");
            const std::string kind = d.value("kind", std::string("scm"));
            if (kind == "scm") {
                c.data.kind = DataSpec::Kind::Scm;
                c.data.scm = parse_scm(d.value("scm", nlohmann::json::object()));
            } else if (kind == "table") {
                c.data.kind = DataSpec::Kind::Table;
                c.data.train_path = resolve(d.at("train").get<std::string>(), base_dir);
                c.data.test_path = resolve(d.at("test").get<std::string>(), base_dir);
                if (d.contains("factors")) {
                    c.data.factors_path = resolve(d.at("factors").get<std::string>(), base_dir);
                }
                c.data.base = d.at("base").get<std::size_t>();
                c.data.increment = d.at("increment").get<std::size_t>();
            } else {
                throw ConfigError("config: data.kind must be \"scm\" or \"table\"");
            }
        }
        if (j.contains("model")) {
            c.model = parse_model(j.at("model"));
        }
        if (j.contains("train")) {
            c.train = j.at("train").get<TrainConfig>();
        }
        if (j.contains("metrics")) {
            c.metrics = parse_metrics(j.at("metrics"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    ExperimentConfig c = parse_experiment_config(j, path.parent_path());
    c.validate();
    return c;
}

nlohmann::json experiment_config_json(const ExperimentConfig& c) {
    nlohmann::json data;
    if (c.data.kind == DataSpec::Kind::Scm) {
        data = {{"kind", "scm"}, {"scm", scm_json(c.data.scm)}};
    } else {
        data = {{"kind", "table"},
                {"train", c.data.train_path.string()},
                {"test", c.data.test_path.string()},
                {"base", c.data.base},
                {"increment", c.data.increment}};
        if (!c.data.factors_path.empty()) {
            data["factors"] = c.data.factors_path.string();
        }
    }
    return {{"run_id", c.run_id},
            {"method", c.method},
            {"scenario", c.scenario},
            {"method_path", c.path == MethodPath::Cpns ? "cpns" : "baseline"},
            {"output_dir", c.output_dir.string()},
            {"seeds", c.seeds},
            {"data", data},
            {"model", model_json(c.model)},
            {"train", c.train},
            {"metrics", metrics_json(c.metrics)}};
}

SeedPlan plan_seeds(const ExperimentConfig& c, std::uint64_t seed) {
    SeedPlan p;
    p.stream = c.data.kind == DataSpec::Kind::Scm ? c.data.scm.seed + seed : seed;
    p.model = splitmix64(seed ^ 0x6d6f64656cULL);
    p.trainer = splitmix64(seed ^ 0x747261696eULL);
    return p;
}

TaskStream build_stream(const ExperimentConfig& c, std::uint64_t seed) {
    const SeedPlan plan = plan_seeds(c, seed);
    if (c.data.kind == DataSpec::Kind::Scm) {
        SyntheticScmConfig scm = c.data.scm;
        scm.seed = plan.stream;
        return gen_scm_stream(scm);
    }
    const Dataset train = load_table(c.data.train_path);
    const Dataset test = load_table(c.data.test_path);
    TaskStream stream = split_tasks(train, test, c.data.base, c.data.increment, plan.stream);
    if (!c.data.factors_path.empty()) {
        FactorAnnotations f;
        f.dim_tags = load_factors(c.data.factors_path);
        if (f.dim_tags.size() != stream.input_dim) {
            throw FormatError("factors file lists " + std::to_string(f.dim_tags.size()) + " dims, data has " +
                              std::to_string(stream.input_dim));
        }
        std::vector<std::size_t> causal;
        for (std::size_t i = 0; i < f.dim_tags.size(); ++i) {
            if (f.dim_tags[i] == FactorTag::Causal || f.dim_tags[i] == FactorTag::MinimalCausal) {
                causal.push_back(i);
            }
        }
        f.class_causal_dims.assign(stream.total_classes(), causal);
        stream.factors = std::move(f);
    }
    return stream;
}

namespace {

/// Spreads `n` picks evenly over `s` so every class of a merged set appears.
std::vector<Sample> strided(const std::vector<Sample>& s, std::size_t n) {
    if (s.size() <= n) {
        return s;
    }
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(s[i * s.size() / n]);
    }
    return out;
}

EvalRecord evaluate_stage(const ExperimentConfig& c, const ExpandableModel& model, const TaskStream& stream,
                          std::size_t t, const std::vector<double>& stage_accs) {
    EvalRecord r;
    r.task_index = t;
    for (std::size_t k = 0; k <= t; ++k) {
        r.task_accuracies.push_back(accuracy(model, stream.tasks[k].test.samples));
    }
    const IncrementalAccuracy ia = incremental_accuracy(stage_accs);
    r.last_acc = ia.last;
    r.avg_acc = ia.avg;
    const Dataset merged = merged_test(stream, t);
    const CounterfactualConfig cf = c.train.counterfactual();
    const std::size_t n = c.metrics.eval_samples;
    const std::vector<Sample> current = strided(stream.tasks[t].test.samples, n);

    if (t >= 1 && c.metrics.old_new_error && stream.factors && !stream.factors->class_prototypes.empty()) {
        const Dataset old = merged_test(stream, t - 1);
        r.old_new_errors = old_new_error(model, old.samples, model.current_range(), stream.factors->class_prototypes);
    }
    if (t >= 1 && c.metrics.cka) {
        r.cka_by_layer = cka_by_layer(model, 0, t, strided(merged.samples, std::max<std::size_t>(n, 2)));
    }
    if (c.metrics.masking && stream.factors && !stream.factors->class_causal_dims.empty() &&
        !c.metrics.masking_ks.empty()) {
        r.masking_curve = masking_curve(model, merged.samples, *stream.factors, c.metrics.masking_ks);
    }
    if (c.metrics.cf_quality) {
        std::vector<CounterfactualSample> samples;
        for (const IntraPoint& p : intra_points(current, model)) {
            samples.push_back(gen_intra(p.feature, p.local_label, model.intra(), cf.alpha, cf.epsilon, cf.generator));
        }
        if (t >= 1) {
            for (const InterPoint& p : inter_points(strided(merged.samples, n), model)) {
                samples.push_back(gen_inter(p.feature, p.projected, cf.beta, cf.epsilon, cf.generator));
            }
        }
        r.cf_quality = counterfactual_quality(samples, model.intra(), false);
    }
    r.cpns_report = empirical_cpns_risk(current, strided(merged.samples, n), model, cf);
    assert_proposition1(r.cpns_report);
    return r;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << text;
}

} // namespace

SeedResult run_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& seed_dir) {
    const SeedPlan plan = plan_seeds(c, seed);
    SeedResult res;
    res.seed = seed;
    res.stream = build_stream(c, seed);
    const TaskStream& stream = res.stream;

    ModelConfig mc = c.model;
    mc.input_dim = stream.input_dim;
    res.model = ExpandableModel(mc, plan.model);
    ExpandableModel& model = res.model;
    TrainConfig tc = c.train;
    tc.seed = seed;
    Rng rng(plan.trainer);
    RehearsalBuffer buffer(tc.buffer_capacity, tc.buffer_policy);

    const bool write = !seed_dir.empty();
    std::ofstream jsonl;
    if (write) {
        fs::create_directories(seed_dir);
        ExperimentConfig effective = c;
        effective.model.input_dim = stream.input_dim;
        write_text(seed_dir / "config.json", experiment_config_json(effective).dump(2) + "\n");
        jsonl.open(seed_dir / "epochs.jsonl", std::ios::binary | std::ios::trunc);
        if (!jsonl) {
            throw FormatError("cannot write " + (seed_dir / "epochs.jsonl").string());
        }
    }
    const EpochCallback log = [&](const EpochMetrics& m) {
        if (write) {
            jsonl << nlohmann::json(m).dump() << '\n';
        }
    };

    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
        const Task& task = stream.tasks[t];
        model.expand(task.range.count);
        if (c.path == MethodPath::Baseline) {
            train_task_baseline(model, task.train, buffer, tc, rng, log);
        } else {
            train_task(model, task.train, buffer, tc, rng, log);
        }
        buffer.commit(task.train, model, rng);
        if (buffer.size() > buffer.capacity()) {
            throw InvariantViolation("buffer exceeds its capacity");
        }
        res.stage_accuracies.push_back(accuracy(model, merged_test(stream, t).samples));
        EvalRecord rec = evaluate_stage(c, model, stream, t, res.stage_accuracies);
        if (write) {
            write_eval_record(rec, seed_dir / ("eval_task_" + std::to_string(t) + ".json"));
            if (c.metrics.checkpoints) {
                model.save(seed_dir / ("checkpoint_task_" + std::to_string(t) + ".cpns"));
            }
        }
        res.evals.push_back(std::move(rec));
    }
    res.accuracy = incremental_accuracy(res.stage_accuracies);
    if (write) {
        const SummaryRow row{c.method, c.scenario, seed, res.accuracy.last, res.accuracy.avg};
        write_summary_csv(std::span<const SummaryRow>(&row, 1), seed_dir / "summary.csv");
    }
    return res;
}

std::vector<SeedResult> run_experiment(const ExperimentConfig& c, unsigned threads) {
    c.validate();
    const fs::path run_dir = c.output_dir / c.run_id;
    fs::create_directories(run_dir);
    std::vector<SeedResult> results(c.seeds.size());
    std::vector<std::exception_ptr> errors(c.seeds.size());
    const auto work = [&](std::size_t i) {
        try {
            results[i] = run_seed(c, c.seeds[i], run_dir / ("seed-" + std::to_string(c.seeds[i])));
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(c.seeds.size())));
    if (threads == 1) {
        for (std::size_t i = 0; i < c.seeds.size(); ++i) {
            work(i);
        }
    } else {
        std::mutex mu;
        std::size_t next = 0;
        std::vector<std::thread> pool;
        for (unsigned k = 0; k < threads; ++k) {
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i;
                    {
                        std::lock_guard<std::mutex> lock(mu);
                        if (next >= c.seeds.size()) {
                            return;
                        }
                        i = next++;
                    }
                    work(i);
                }
            });
        }
        for (std::thread& th : pool) {
            th.join();
        }
    }
    for (const std::exception_ptr& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    std::vector<SummaryRow> rows;
    for (const SeedResult& r : results) {
        rows.push_back({c.method, c.scenario, r.seed, r.accuracy.last, r.accuracy.avg});
    }
    write_summary_csv(rows, run_dir / "summary.csv");
    return results;
}

MeanAccuracy seed_mean(const std::vector<SeedResult>& results) {
    MeanAccuracy m;
    if (results.empty()) {
        return m;
    }
    for (const SeedResult& r : results) {
        m.last += r.accuracy.last;
        m.avg += r.accuracy.avg;
    }
    m.last /= static_cast<double>(results.size());
    m.avg /= static_cast<double>(results.size());
    return m;
}

bool is_sweep_param(const std::string& name) {
    static const std::set<std::string> names = {"lambda", "gamma", "beta", "epsilon", "alpha", "nu"};
    return names.contains(name);
}

void set_sweep_param(TrainConfig& c, const std::string& name, double value) {
    if (name == "lambda") c.lambda = value;
    else if (name == "gamma") c.gamma = value;
    else if (name == "beta") c.beta = value;
    else if (name == "epsilon") c.epsilon = value;
    else if (name == "alpha") c.alpha = value;
    else if (name == "nu") c.nu = value;
    else throw ConfigError("unknown sweep parameter: " + name);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& c, const std::string& param,
                                const std::vector<std::string>& values, unsigned threads) {
    if (!is_sweep_param(param)) {
        throw ConfigError("unknown sweep parameter: " + param);
    }
    if (values.empty()) {
        throw ConfigError("sweep: no values given");
    }
    std::vector<double> parsed;
    for (const std::string& v : values) {
        try {
            std::size_t used = 0;
            parsed.push_back(std::stod(v, &used));
            if (used != v.size()) {
                throw std::invalid_argument(v);
            }
        } catch (const std::exception&) {
            throw ConfigError("sweep: value is not a number: " + v);
        }
    }
    // Validate every variant before running any of them.
    std::vector<ExperimentConfig> variants;
    for (std::size_t i = 0; i < values.size(); ++i) {
        ExperimentConfig v = c;
        set_sweep_param(v.train, param, parsed[i]);
        v.output_dir = c.output_dir / c.run_id;
        v.run_id = "sweep-" + param + "-" + values[i];
        v.validate();
        variants.push_back(std::move(v));
    }
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        rows.push_back({values[i], seed_mean(run_experiment(variants[i], threads))});
    }
    std::string csv = "value,last,avg\n";
    for (const SweepRow& r : rows) {
        csv += r.value + "," + format_double(r.mean.last) + "," + format_double(r.mean.avg) + "\n";
    }
    write_text(c.output_dir / c.run_id / ("sweep_" + param + ".csv"), csv);
    return rows;
}

std::vector<AblationVariant> ablation_variants() {
    return {{"baseline", false, false, false},        {"intra", true, false, false},
            {"inter_single_stage", false, true, false}, {"inter_two_stage", false, true, true},
            {"both_single_stage", true, true, false},   {"full", true, true, true}};
}

ExperimentConfig ablation_config(const ExperimentConfig& c, const AblationVariant& v) {
    ExperimentConfig out = c;
    out.train.intra_scope = v.intra;
    out.train.inter_scope = v.inter;
    if (!v.two_stage) {
        out.train.stage1_epochs = 0;
    }
    out.method = v.name;
    out.output_dir = c.output_dir / c.run_id;
    out.run_id = "ablate-" + v.name;
    return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& c, unsigned threads) {
    c.validate();
    std::vector<AblationRow> rows;
    for (const AblationVariant& v : ablation_variants()) {
        rows.push_back({v, seed_mean(run_experiment(ablation_config(c, v), threads))});
    }
    std::string csv = "variant,intra,inter,two_stage,last,avg\n";
    for (const AblationRow& r : rows) {
        csv += r.variant.name + "," + (r.variant.intra ? "1" : "0") + "," + (r.variant.inter ? "1" : "0") + "," +
               (r.variant.two_stage ? "1" : "0") + "," + format_double(r.mean.last) + "," +
               format_double(r.mean.avg) + "\n";
    }
    write_text(c.output_dir / c.run_id / "ablation.csv", csv);
    return rows;
}

} // namespace cpns
