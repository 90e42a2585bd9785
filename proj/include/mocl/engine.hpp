#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mocl/backbone.hpp"
#include "mocl/bench.hpp"
#include "mocl/metrics.hpp"
#include "mocl/peft.hpp"
#include "mocl/taskrep.hpp"

namespace mocl {

enum class Method {
    mocl_p,       // composition + pruning
    mocl,         // composition, pruning disabled
    per_task_ft,  // each task uses only its own module
    seq_ft,       // one shared module trained on every task, never frozen
};

std::string_view to_string(Method m);
Method parse_method(std::string_view tag);

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lr = 1e-2;
    double weight_decay = 0.01;
    double aux_weight = 1.0;  // lambda
    RepKind rep_strategy = RepKind::trainable;
    /// Epochs during which v_m is updated; unset means all epochs.
    std::optional<std::size_t> rep_train_epochs;
    std::size_t prefix_len = 4;
    std::uint64_t seed = 0;
    MatchOptions match;

    void validate() const;
    std::size_t effective_rep_epochs() const { return rep_train_epochs.value_or(epochs); }
};

struct PruneConfig {
    double threshold = 0.025;
    bool keep_first_guard = true;

    void validate() const;
};

struct TaskOutcome {
    TaskId task_id = 0;
    double mean_match_weight = 0.0;
    Decision decision = Decision::kept;
    bool guard_fired = false;
    MetricRecord train_metrics;
    MetricRecord val_metrics;
    /// Mean over the train split of cos(x, v_m); 0 for non-vector representations.
    double mean_rep_cosine = 0.0;
    std::vector<double> loss_curve;  // mean per-instance loss, one entry per epoch

    friend bool operator==(const TaskOutcome&, const TaskOutcome&) = default;
};

struct TrainedTask {
    PrefixModule prefix;
    TaskRepresentation rep;
    TaskHead head;
    TaskOutcome outcome;  // decision fields are filled in by the caller
};

/// Tape leaves of one task's objective. `rep` is left unset unless the representation is trainable.
struct ObjectiveVars {
    Var prefix;
    Var weight;
    Var bias;
    Var rep;
};

/// Sum over `batch` of CE(y, head(encode(tokens, prefix))) - aux_weight * cos(x, v_m).
///
/// For mocl/mocl_p the prefix is compose(pool + P_m, alpha(x)); otherwise P_m alone, and
/// the cosine term is dropped. `inputs[k]` is the pooled input embedding of `batch[k]`.
Var batch_objective(Tape& tape, const ModulePool& pool, const TaskRepresentation& current_rep,
                    const ObjectiveVars& vars, const std::vector<const Example*>& batch,
                    const std::vector<const Tensor*>& inputs, const BackboneParams& backbone,
                    const TrainConfig& config, Method method);

/// Trains P_m, v_m and the head for one task against a frozen pool.
///
/// For mocl/mocl_p the prefix fed to the encoder is compose(pool + P_m, alpha) with
/// per-instance alpha from matching x against the pool representations plus v_m.
/// per_task_ft uses P_m alone. seq_ft trains `*shared` in place (it must be unfrozen),
/// and the returned prefix is a copy of it.
TrainedTask train_task(const ModulePool& pool, const TaskData& task, const BackboneParams& backbone,
                       const TrainConfig& config, Method method = Method::mocl_p, PrefixModule* shared = nullptr);

/// Where the prefix for an evaluation comes from.
struct EvalTarget {
    const ModulePool* pool = nullptr;  // composed over its entries
    const PoolEntry* extra = nullptr;  // appended after the pool entries (module still in training)
    const PrefixModule* fixed = nullptr;  // used alone, bypassing matching
    MatchOptions match;
};

/// Per-instance forward with the task's own head. Worker count comes from MOCL_EVAL_WORKERS
/// (default 1); results do not depend on it.
ConfusionCounts evaluate_counts(const EvalTarget& target, const std::vector<Example>& examples, const TaskHead& head,
                                const BackboneParams& backbone);
MetricRecord evaluate(const EvalTarget& target, const std::vector<Example>& examples, const TaskHead& head,
                      const BackboneParams& backbone);
/// Test split of `task`, composed over `pool`, with the pool's stored head for the task.
MetricRecord evaluate(const ModulePool& pool, const TaskData& task, const BackboneParams& backbone,
                      const MatchOptions& match = {});

/// Mean over `examples` of the clamped matching weight of the last representation in `reps`.
double mean_match_weight(const std::vector<const TaskRepresentation*>& reps, const std::vector<Example>& examples,
                         const BackboneParams& backbone, const MatchOptions& match = {});

struct PruneVerdict {
    Decision decision = Decision::kept;
    bool guard_fired = false;
};

/// Pruned iff mean_weight < threshold; the guard keeps the module when the pool is empty.
PruneVerdict prune_decision(double mean_weight, const PruneConfig& config, std::size_t pool_size);

struct RunConfig {
    Method method = Method::mocl_p;
    TrainConfig train;
    PruneConfig prune;
};

/// Content hashes captured at the moment an entity was frozen.
struct FreezeHashes {
    std::uint64_t prefix = 0;
    std::uint64_t rep = 0;
    std::uint64_t head = 0;
    bool kept = false;
};

struct RunResult {
    AccuracyMatrix accuracy;
    AccuracyMatrix macro_f1;
    ModulePool pool;
    std::vector<TaskOutcome> outcomes;
    std::vector<std::size_t> pool_size_trajectory;
    ParamCounts params;
    std::map<TaskId, FreezeHashes> freeze_hashes;
    /// Every task's representation as it was when the task finished, kept or pruned.
    std::vector<TaskRepresentation> task_reps;
    std::optional<PrefixModule> shared_prefix;  // seq_ft only
};

/// Trains the tasks in order, filling row i of both matrices after task i.
RunResult run_sequence(const std::vector<TaskData>& tasks, const BackboneParams& backbone, const RunConfig& config);

}  // namespace mocl
