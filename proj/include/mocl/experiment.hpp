#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mocl/backbone.hpp"
#include "mocl/bench.hpp"
#include "mocl/engine.hpp"

namespace mocl {

inline constexpr std::string_view kVersion = "0.1.0";

/// Invalid configuration or usage. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string suite = "mixed_suite";  // builtin name or descriptor file path
    std::vector<std::string> orders = {"O1"};
    Method method = Method::mocl_p;
    TrainConfig train;
    PruneConfig prune;
    BackboneConfig backbone;
    std::uint64_t backbone_seed = 0;
    std::vector<std::uint64_t> seeds = {0};
    std::filesystem::path out = "runs/default";
};

/// Flat dotted keys accepted by config files and overrides, in echo order.
const std::vector<std::string>& config_keys();

/// Sets one key. `text` is parsed as JSON when possible, otherwise taken as a bare string;
/// list-valued keys also accept comma-separated text. Throws ConfigError.
void apply_override(ExperimentConfig& config, std::string_view key, std::string_view text);

/// Reads a structured-text (JSON object) document of flat dotted keys on top of the defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base);

/// Throws ConfigError listing every invalid field.
void validate_config(const ExperimentConfig& config);

/// Compact, key-ordered JSON echo of every config key.
std::string config_echo(const ExperimentConfig& config);

SuiteDefinition resolve_suite(const ExperimentConfig& config);
BackboneParams make_backbone(const ExperimentConfig& config);

struct RunSummary {
    std::string order;
    std::uint64_t seed = 0;
    double avg_accuracy = 0.0;
    double avg_macro_f1 = 0.0;
    double mean_forgetting = 0.0;
    std::size_t pool_size = 0;
    ParamCounts params;
};

struct ExperimentSummary {
    std::vector<RunSummary> runs;
    double avg_accuracy = 0.0;  // means over runs
    double avg_macro_f1 = 0.0;
    double pool_size = 0.0;
    double total_params = 0.0;
};

/// Directory name of one (order, seed) run.
std::string run_dir_name(const std::string& order, std::uint64_t seed);

/// Runs every (order, seed) pair and writes all artifacts under config.out.
ExperimentSummary run_experiment(const ExperimentConfig& config);

// Commands. Each returns an exit code: 0 success, 1 runtime failure, 2 usage/config error.
int cmd_run(const ExperimentConfig& config);
int cmd_sweep(const ExperimentConfig& config, const std::vector<double>& thresholds);
int cmd_ablate(const ExperimentConfig& config, const std::string& axis, const std::vector<std::string>& values);
int cmd_export_vectors(const std::filesystem::path& run_dir);
int cmd_report(const std::filesystem::path& run_dir, std::ostream& out);

}  // namespace mocl
