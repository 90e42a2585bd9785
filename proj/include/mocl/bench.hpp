#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mocl/backbone.hpp"
#include "mocl/taskrep.hpp"

namespace mocl {

enum class Rule {
    marker_presence,  // label = which of k marker tokens occurs
    majority_token,   // label = the more frequent token of a designated pair
    position_rule,    // label = identity of the token at a designated position
};

enum class Relation { fresh, clone_of, perturbed };

std::string_view to_string(Rule r);
std::string_view to_string(Relation r);
Rule parse_rule(std::string_view tag);
Relation parse_relation(std::string_view tag);

struct SplitSizes {
    std::size_t train = 200;
    std::size_t val = 50;
    std::size_t test = 100;

    friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

/// Everything that determines a task's distribution. Clones share these exactly.
struct GeneratorParams {
    Rule rule = Rule::marker_presence;
    std::vector<TokenId> token_subset;
    std::vector<TokenId> designated;  // markers, the majority pair, or the position rule's class tokens
    std::size_t position = 0;         // position_rule only
    std::size_t n_classes = 2;
    std::size_t seq_len = 12;

    /// Subset tokens that are not designated.
    std::vector<TokenId> filler() const;
    /// Throws ContractViolation when the subset cannot support the rule.
    void validate(const BackboneConfig& config) const;

    friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

struct TaskDescriptor {
    TaskId id = 0;
    Relation relation = Relation::fresh;
    TaskId source = 0;           // clone_of / perturbed
    double swap_fraction = 0.0;  // perturbed, in [0, 0.5]
    GeneratorParams params;      // fresh only; derived for the other relations
    SplitSizes sizes;
};

struct Example {
    std::vector<TokenId> tokens;
    std::size_t label = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

struct TaskData {
    TaskId id = 0;
    GeneratorParams params;
    std::vector<Example> train, val, test;

    std::size_t n_classes() const { return params.n_classes; }
    std::uint64_t hash() const;
};

/// Unordered descriptor set plus named task orders.
struct SuiteDefinition {
    std::string name;
    std::vector<TaskDescriptor> tasks;
    std::map<std::string, std::vector<TaskId>> orders;

    const TaskDescriptor& descriptor(TaskId id) const;
};

struct SequenceSpec {
    SuiteDefinition suite;
    std::string order = "O1";
    std::uint64_t seed = 0;
};

/// Resolves clone/perturbed relations to concrete generator parameters.
GeneratorParams resolve_params(const SuiteDefinition& suite, TaskId id, const BackboneConfig& config);

/// Deterministic generation of all three splits; labels balanced to within one per class.
TaskData generate_task(const TaskDescriptor& descriptor, const GeneratorParams& params, std::uint64_t seed);
/// Convenience overload for fresh descriptors.
TaskData generate_task(const TaskDescriptor& descriptor, std::uint64_t seed);

/// Materializes tasks in the requested order. Each task's data depends on (seed, task id) only.
std::vector<TaskData> make_sequence(const SequenceSpec& spec, const BackboneConfig& config);

/// Re-derives an example's label from the rule, independent of the generator's bookkeeping.
std::optional<std::size_t> rule_label(const GeneratorParams& params, const std::vector<TokenId>& tokens);

SuiteDefinition clone_suite(std::size_t n = 10);
SuiteDefinition disjoint_suite(std::size_t n = 5);
SuiteDefinition mixed_suite();
/// Builtin suite by name; throws ContractViolation when unknown.
SuiteDefinition builtin_suite(const std::string& name);
std::vector<std::string> builtin_suite_names();

void validate_suite(const SuiteDefinition& suite, const BackboneConfig& config);

void write_suite(const SuiteDefinition& suite, const std::filesystem::path& path);
SuiteDefinition read_suite(const std::filesystem::path& path);

/// Line-delimited records {task_id, split, token_ids, label}.
void write_task_data(const std::vector<TaskData>& tasks, const std::filesystem::path& path);
/// Returns examples grouped by task id; generator params are not stored and left default.
std::vector<TaskData> read_task_data(const std::filesystem::path& path);

}  // namespace mocl
