#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mocl/autodiff.hpp"
#include "mocl/backbone.hpp"
#include "mocl/optim.hpp"
#include "mocl/taskrep.hpp"

namespace mocl {

/// Per-task key/value prefix, shaped [n_layers, 2, prefix_len, d_model] (axis 1: 0 = key, 1 = value).
struct PrefixModule {
    TaskId task_id = 0;
    std::size_t prefix_len = 0;
    Parameter tensor;

    bool frozen() const { return tensor.frozen; }
    std::uint64_t hash() const { return tensor.hash(); }
};

/// Linear classifier on the pooled hidden state.
struct TaskHead {
    TaskId task_id = 0;
    std::size_t n_classes = 0;
    Parameter weight;  // [n_classes, d_model]
    Parameter bias;    // [n_classes]

    bool frozen() const { return weight.frozen && bias.frozen; }
    std::uint64_t hash() const;
};

PrefixModule init_prefix(const BackboneConfig& config, std::size_t prefix_len, TaskId task_id, std::uint64_t seed);
TaskHead init_head(const BackboneConfig& config, std::size_t n_classes, TaskId task_id, std::uint64_t seed);

/// sum_k weights[k] * modules[k] on the tape; differentiable w.r.t. weights and tracked modules.
Var compose(const std::vector<Var>& modules, Var weights);
/// Value-level composition of stored modules.
Tensor compose(const std::vector<const PrefixModule*>& modules, const Tensor& weights);

/// Mark as frozen. Freezing an already-frozen entity logs a warning and changes nothing.
void freeze(PrefixModule& module);
void freeze(TaskHead& head);
void freeze(TaskRepresentation& rep);

enum class Decision { kept, pruned };
std::string_view to_string(Decision d);

struct PoolEntry {
    PrefixModule prefix;
    TaskRepresentation rep;
    double mean_match_weight = 0.0;
};

/// One line of the pool manifest; written for every task, kept or pruned.
struct ManifestRecord {
    TaskId task_id = 0;
    Decision decision = Decision::kept;
    double mean_match_weight = 0.0;
    bool guard_fired = false;
    std::string prefix_hash;
    std::string rep_hash;

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

/// Frozen modules that survived pruning, in insertion order, plus every task's head.
class ModulePool {
 public:
    /// Both prefix and representation must already be frozen.
    void insert(PoolEntry entry);
    /// Heads are never pruned; the head must be frozen.
    void add_head(TaskHead head);
    void add_record(ManifestRecord record);

    const std::vector<PoolEntry>& entries() const noexcept { return entries_; }
    const std::map<TaskId, TaskHead>& heads() const noexcept { return heads_; }
    const std::vector<ManifestRecord>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    /// Throws ContractViolation if the task has no stored head.
    const TaskHead& head(TaskId task) const;
    const PoolEntry* find(TaskId task) const;

 private:
    std::vector<PoolEntry> entries_;
    std::map<TaskId, TaskHead> heads_;
    std::vector<ManifestRecord> records_;
};

struct ParamCounts {
    std::size_t prefix_params = 0;
    std::size_t rep_params = 0;
    std::size_t head_params = 0;
    std::size_t total = 0;

    friend bool operator==(const ParamCounts&, const ParamCounts&) = default;
};

/// Trainable-parameter accounting for a pool. Pruned tasks contribute their head only.
ParamCounts pool_param_count(const ModulePool& pool, const BackboneConfig& config);

void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path);
/// Throws ParseError with the offending line number.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

}  // namespace mocl
