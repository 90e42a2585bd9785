// mocl: command-line front end for the continual-learning experiments.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mocl/bench.hpp"
#include "mocl/error.hpp"
#include "mocl/experiment.hpp"
#include "mocl/log.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string seeds;
    std::string out;
    std::string method;
    std::optional<double> threshold;
    std::string rep_strategy;
    std::string rep_train_epochs;
    std::string suite;
    std::string orders;

    void attach(CLI::App* app, bool with_threshold) {
        app->add_option("--config", config_path, "config file (JSON object of dotted keys)");
        app->add_option("--set", sets, "override a config key, key=value (repeatable, last wins)");
        app->add_option("--seed", seed, "single seed");
        app->add_option("--seeds", seeds, "comma-separated seed list");
        app->add_option("--out", out, "output directory");
        app->add_option("--method", method, "mocl_p | mocl | per_task_ft | seq_ft");
        if (with_threshold) app->add_option("--threshold", threshold, "pruning threshold");
        app->add_option("--rep-strategy", rep_strategy, "trainable | gaussian | embed_mean");
        app->add_option("--rep-train-epochs", rep_train_epochs, "epochs during which task vectors train");
        app->add_option("--suite", suite, "builtin suite name or descriptor file");
        app->add_option("--orders", orders, "comma-separated task orders");
    }

    // Config file first, then named flags, then --set in order.
    mocl::ExperimentConfig build() const {
        mocl::ExperimentConfig c = config_path.empty() ? mocl::ExperimentConfig{} : mocl::load_config(config_path);
        if (!suite.empty()) mocl::apply_override(c, "suite", "\"" + suite + "\"");
        if (!orders.empty()) mocl::apply_override(c, "orders", orders);
        if (!method.empty()) mocl::apply_override(c, "method", "\"" + method + "\"");
        if (seed) mocl::apply_override(c, "seeds", std::to_string(*seed));
        if (!seeds.empty()) mocl::apply_override(c, "seeds", seeds);
        if (!out.empty()) mocl::apply_override(c, "out", "\"" + out + "\"");
        if (threshold) mocl::apply_override(c, "prune.threshold", mocl::format_shortest(*threshold));
        if (!rep_strategy.empty()) mocl::apply_override(c, "train.rep_strategy", "\"" + rep_strategy + "\"");
        if (!rep_train_epochs.empty()) mocl::apply_override(c, "train.rep_train_epochs", rep_train_epochs);
        for (const std::string& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw mocl::ConfigError("--set expects key=value, got '" + kv + "'");
            mocl::apply_override(c, kv.substr(0, eq), kv.substr(eq + 1));
        }
        return c;
    }
};

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual learning with composed, pruned prefix modules"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "log progress to stderr");

    CommonFlags run_flags, sweep_flags, ablate_flags;
    CLI::App* run = app.add_subcommand("run", "run an experiment for every configured order and seed");
    run_flags.attach(run, true);

    CLI::App* sweep = app.add_subcommand("sweep", "one run per pruning threshold");
    sweep_flags.attach(sweep, false);
    std::string thresholds;
    sweep->add_option("--thresholds", thresholds, "comma-separated thresholds")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "one run per value of an ablation axis");
    ablate_flags.attach(ablate, true);
    std::string axis, values;
    ablate->add_option("--axis", axis, "rep_strategy | rep_train_epochs")->required();
    ablate->add_option("--values", values, "comma-separated axis values")->required();

    CLI::App* export_vectors = app.add_subcommand("export-vectors", "write vectors.csv from a run directory");
    std::string export_dir;
    export_vectors->add_option("dir", export_dir, "run directory")->required();

    CLI::App* report = app.add_subcommand("report", "print a summary table for an experiment directory");
    std::string report_dir;
    report->add_option("dir", report_dir, "experiment directory")->required();

    CLI::App* dump_suite = app.add_subcommand("dump-suite", "write a builtin suite descriptor file");
    std::string suite_name, suite_path;
    dump_suite->add_option("name", suite_name, "builtin suite")->required();
    dump_suite->add_option("path", suite_path, "output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (verbose) mocl::set_log_level(mocl::LogLevel::info);

    try {
        if (*run) return mocl::cmd_run(run_flags.build());
        if (*sweep) {
            std::vector<double> ts;
            for (const std::string& t : split(thresholds)) {
                try {
                    std::size_t used = 0;
                    ts.push_back(std::stod(t, &used));
                    if (used != t.size()) throw std::invalid_argument(t);
                } catch (const std::exception&) {
                    throw mocl::ConfigError("thresholds: '" + t + "' is not a number");
                }
            }
            return mocl::cmd_sweep(sweep_flags.build(), ts);
        }
        if (*ablate) return mocl::cmd_ablate(ablate_flags.build(), axis, split(values));
        if (*export_vectors) return mocl::cmd_export_vectors(export_dir);
        if (*report) return mocl::cmd_report(report_dir, std::cout);
        if (*dump_suite) {
            mocl::write_suite(mocl::builtin_suite(suite_name), suite_path);
            return 0;
        }
    } catch (const mocl::ConfigError& e) {
        std::cerr << "mocl: config error: " << e.what() << '\n';
        return 2;
    } catch (const mocl::ContractViolation& e) {
        std::cerr << "mocl: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "mocl: error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
