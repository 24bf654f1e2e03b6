// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// cpnslab command line: run, sweep, ablate, eval.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
// input, 3 invariant breach.

#include "cpns/errors.hpp"
#include "cpns/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitInvariant = 3;

struct GlobalOptions {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<unsigned> threads;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

unsigned resolve_threads(const GlobalOptions& g) {
    if (g.threads) {
        return std::max(1u, *g.threads);
    }
    if (const char* env = std::getenv("CPNS_THREADS")) {
        try {
            return std::max(1u, static_cast<unsigned>(std::stoul(env)));
        } catch (const std::exception&) {
            throw cpns::ConfigError(std::string("CPNS_THREADS is not a number: ") + env);
        }
    }
    return 1;
}

cpns::ExperimentConfig load(const std::string& path, const GlobalOptions& g) {
    cpns::ExperimentConfig c = cpns::load_experiment_config(path);
    if (const char* env = std::getenv("CPNS_OUTPUT_DIR")) {
        c.output_dir = env;
    }
    if (g.out) {
        c.output_dir = *g.out;
    }
    if (g.seed) {
        c.seeds = {*g.seed};
    }
    c.validate();
    return c;
}

void print_summary(const std::string& label, const cpns::MeanAccuracy& m) {
    std::cout << label << " last=" << cpns::format_double(m.last) << " avg=" << cpns::format_double(m.avg) << '\n';
}

int cmd_run(const std::string& config, const GlobalOptions& g) {
    const cpns::ExperimentConfig c = load(config, g);
    const auto results = cpns::run_experiment(c, resolve_threads(g));
    for (const auto& r : results) {
        std::cout << "seed " << r.seed << " last=" << cpns::format_double(r.accuracy.last)
                  << " avg=" << cpns::format_double(r.accuracy.avg) << '\n';
    }
    print_summary(c.run_id, cpns::seed_mean(results));
    return 0;
}

int cmd_sweep(const std::string& config, const std::string& param, const std::string& values,
              const GlobalOptions& g) {
    if (!cpns::is_sweep_param(param)) {
        throw cpns::ConfigError("unknown sweep parameter: " + param +
                                " (expected lambda, gamma, beta, epsilon, alpha or nu)");
    }
    const cpns::ExperimentConfig c = load(config, g);
    for (const auto& row : cpns::run_sweep(c, param, split_csv(values), resolve_threads(g))) {
        print_summary(param + "=" + row.value, row.mean);
    }
    return 0;
}

int cmd_ablate(const std::string& config, const GlobalOptions& g) {
    const cpns::ExperimentConfig c = load(config, g);
    for (const auto& row : cpns::run_ablation(c, resolve_threads(g))) {
        print_summary(row.variant.name, row.mean);
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data) {
    const cpns::ExpandableModel model = cpns::ExpandableModel::load(checkpoint);
    const cpns::Dataset ds = cpns::load_table(data);
    if (ds.dims != model.input_dim()) {
        throw cpns::FormatError("data has " + std::to_string(ds.dims) + " dims, model expects " +
                                std::to_string(model.input_dim()));
    }
    std::vector<cpns::Sample> seen;
    for (const cpns::Sample& s : ds.samples) {
        if (s.label < model.total_classes()) {
            seen.push_back(s);
        }
    }
    nlohmann::json out = {{"samples", seen.size()},
                          {"skipped", ds.samples.size() - seen.size()},
                          {"total_classes", model.total_classes()},
                          {"tasks", model.extractor_count()}};
    out["accuracy"] = seen.empty() ? nlohmann::json(nullptr) : nlohmann::json(cpns::accuracy(model, seen));
    std::cout << out.dump(2) << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cpnslab: class-incremental experiments with counterfactual causal risk"};
    app.require_subcommand(1);
    GlobalOptions g;
    std::uint64_t seed = 0;
    std::string out;
    unsigned threads = 1;

    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Run only this seed");
        sub->add_option("--out", out, "Output directory (overrides config and CPNS_OUTPUT_DIR)");
        sub->add_option("--threads", threads, "Seeds to run concurrently (overrides CPNS_THREADS)");
    };

    std::string config;
    CLI::App* run = app.add_subcommand("run", "Run the incremental loop for every seed");
    run->add_option("config", config, "Experiment config (JSON)")->required();
    add_globals(run);

    std::string param;
    std::string values;
    CLI::App* sweep = app.add_subcommand("sweep", "One run per parameter value");
    sweep->add_option("config", config, "Experiment config (JSON)")->required();
    sweep->add_option("--param", param, "lambda, gamma, beta, epsilon, alpha or nu")->required();
    sweep->add_option("--values", values, "Comma-separated values")->required();
    add_globals(sweep);

    CLI::App* ablate = app.add_subcommand("ablate", "Run the six ablation variants");
    ablate->add_option("config", config, "Experiment config (JSON)")->required();
    add_globals(ablate);

    std::string checkpoint;
    std::string data;
    CLI::App* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on a table file");
    eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("data", data, "Table file")->required();
    add_globals(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInvalid;
    }
    for (CLI::App* sub : app.get_subcommands()) {
        if (sub->count("--seed") > 0) g.seed = seed;
        if (sub->count("--out") > 0) g.out = out;
        if (sub->count("--threads") > 0) g.threads = threads;
    }

    try {
        if (run->parsed()) return cmd_run(config, g);
        if (sweep->parsed()) return cmd_sweep(config, param, values, g);
        if (ablate->parsed()) return cmd_ablate(config, g);
        if (eval->parsed()) return cmd_eval(checkpoint, data);
    } catch (const cpns::InvariantViolation& e) {
        std::cerr << "invariant violation: " << e.what() << '\n';
        return kExitInvariant;
    } catch (const cpns::ConfigError& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cpns::ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cpns::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const cpns::InputError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
