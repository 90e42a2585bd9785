#include "mocl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <set>
#include <thread>

#include "mocl/error.hpp"
#include "mocl/log.hpp"
#include "mocl/optim.hpp"
#include "mocl/rng.hpp"

namespace mocl {

std::string_view to_string(Method m) {
    switch (m) {
        case Method::mocl_p:
            return "mocl_p";
        case Method::mocl:
            return "mocl";
        case Method::per_task_ft:
            return "per_task_ft";
        case Method::seq_ft:
            return "seq_ft";
    }
    return "?";
}

Method parse_method(std::string_view tag) {
    if (tag == "mocl_p") return Method::mocl_p;
    if (tag == "mocl") return Method::mocl;
    if (tag == "per_task_ft") return Method::per_task_ft;
    if (tag == "seq_ft") return Method::seq_ft;
    throw ContractViolation("unknown method '" + std::string(tag) + "' (expected mocl_p, mocl, per_task_ft or seq_ft)");
}

void TrainConfig::validate() const {
    MOCL_EXPECT(epochs >= 1, "train.epochs must be positive");
    MOCL_EXPECT(batch_size >= 1, "train.batch_size must be positive");
    MOCL_EXPECT(lr > 0.0 && std::isfinite(lr), "train.lr must be positive");
    MOCL_EXPECT(weight_decay >= 0.0, "train.weight_decay must be >= 0");
    MOCL_EXPECT(aux_weight >= 0.0, "train.aux_weight must be >= 0");
    MOCL_EXPECT(prefix_len >= 1, "train.prefix_len must be positive");
}

void PruneConfig::validate() const {
    MOCL_EXPECT(threshold >= -1.0 && threshold <= 1.0, "prune.threshold must lie in [-1, 1]");
}

namespace {

std::vector<Tensor> input_embeddings(const BackboneParams& backbone, const std::vector<Example>& examples) {
    std::vector<Tensor> xs;
    xs.reserve(examples.size());
    for (const Example& e : examples) xs.push_back(pool_input_embedding(backbone, e.tokens));
    return xs;
}

Var head_logits(Var weight, Var bias, Var h) { return add(matvec(weight, h), bias); }

std::size_t argmax(const Tensor& t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[best]) best = i;
    return best;
}

// Prefix for one instance given a target; returns prefix_len 0 when there is nothing to compose.
PrefixInput target_prefix(Tape& tape, const EvalTarget& target, const Tensor& x) {
    if (target.fixed != nullptr) return {tape.borrow(target.fixed->tensor.value), target.fixed->prefix_len};
    std::vector<MatchOperand> reps;
    std::vector<Var> modules;
    std::size_t plen = 0;
    auto add_entry = [&](const PoolEntry& e) {
        reps.push_back({&e.rep, Var{}});
        modules.push_back(tape.borrow(e.prefix.tensor.value));
        plen = e.prefix.prefix_len;
    };
    if (target.pool != nullptr)
        for (const PoolEntry& e : target.pool->entries()) add_entry(e);
    if (target.extra != nullptr) add_entry(*target.extra);
    if (modules.empty()) return {};
    Var alpha = match_weights(tape, x, reps, target.match);
    return {compose(modules, alpha), plen};
}

std::size_t eval_workers() {
    const char* env = std::getenv("MOCL_EVAL_WORKERS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) {
        log_warn(std::string("ignoring invalid MOCL_EVAL_WORKERS='") + env + "'");
        return 1;
    }
    return static_cast<std::size_t>(std::min<long>(n, 64));
}

}  // namespace

ConfusionCounts evaluate_counts(const EvalTarget& target, const std::vector<Example>& examples, const TaskHead& head,
                                const BackboneParams& backbone) {
    auto run_range = [&](std::size_t lo, std::size_t hi) {
        ConfusionCounts cc(head.n_classes);
        Tape tape;
        for (std::size_t i = lo; i < hi; ++i) {
            tape.reset();
            const Example& ex = examples[i];
            const Tensor x = pool_input_embedding(backbone, ex.tokens);
            const PrefixInput prefix = target_prefix(tape, target, x);
            Var h = encode(tape, backbone, ex.tokens, prefix.prefix_len > 0 ? &prefix : nullptr);
            Var logits = head_logits(tape.borrow(head.weight.value), tape.borrow(head.bias.value), h);
            MOCL_EXPECT(ex.label < head.n_classes, "evaluate: label outside the head's classes");
            cc.add(ex.label, argmax(logits.value()));
        }
        return cc;
    };

    const std::size_t workers = std::min(eval_workers(), std::max<std::size_t>(1, examples.size()));
    if (workers <= 1) return run_range(0, examples.size());

    std::vector<ConfusionCounts> partial(workers, ConfusionCounts(head.n_classes));
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    const std::size_t chunk = (examples.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                const std::size_t lo = std::min(examples.size(), w * chunk);
                const std::size_t hi = std::min(examples.size(), lo + chunk);
                partial[w] = run_range(lo, hi);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    ConfusionCounts total(head.n_classes);
    for (const auto& p : partial) total.merge(p);
    return total;
}

MetricRecord evaluate(const EvalTarget& target, const std::vector<Example>& examples, const TaskHead& head,
                      const BackboneParams& backbone) {
    return evaluate_counts(target, examples, head, backbone).metrics();
}

MetricRecord evaluate(const ModulePool& pool, const TaskData& task, const BackboneParams& backbone,
                      const MatchOptions& match) {
    const TaskHead& head = pool.head(task.id);
    EvalTarget target;
    target.pool = &pool;
    target.match = match;
    return evaluate(target, task.test, head, backbone);
}

double mean_match_weight(const std::vector<const TaskRepresentation*>& reps, const std::vector<Example>& examples,
                         const BackboneParams& backbone, const MatchOptions& match) {
    MOCL_EXPECT(!reps.empty() && !examples.empty(), "mean_match_weight: empty input");
    double total = 0.0;
    for (const Example& e : examples) {
        const Tensor alpha = match_weights(pool_input_embedding(backbone, e.tokens), reps, match);
        total += std::max(0.0, alpha[alpha.size() - 1]);
    }
    return total / static_cast<double>(examples.size());
}

PruneVerdict prune_decision(double mean_weight, const PruneConfig& config, std::size_t pool_size) {
    if (!(mean_weight < config.threshold)) return {Decision::kept, false};
    if (config.keep_first_guard && pool_size == 0) return {Decision::kept, true};
    return {Decision::pruned, false};
}

Var batch_objective(Tape& tape, const ModulePool& pool, const TaskRepresentation& current_rep,
                    const ObjectiveVars& vars, const std::vector<const Example*>& batch,
                    const std::vector<const Tensor*>& inputs, const BackboneParams& backbone,
                    const TrainConfig& config, Method method) {
    MOCL_EXPECT(!batch.empty() && batch.size() == inputs.size(), "batch_objective: batch and inputs differ in size");
    const bool composing = method == Method::mocl_p || method == Method::mocl;
    const bool aux = composing && vars.rep.valid() && config.aux_weight > 0.0;

    std::vector<MatchOperand> reps;
    std::vector<Var> modules;
    if (composing) {
        for (const PoolEntry& e : pool.entries()) {
            reps.push_back({&e.rep, Var{}});
            modules.push_back(tape.borrow(e.prefix.tensor.value));
        }
        reps.push_back({&current_rep, vars.rep});
        modules.push_back(vars.prefix);
    }

    std::vector<Var> losses;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const Example& ex = *batch[k];
        const Tensor& x = *inputs[k];
        PrefixInput prefix{vars.prefix, config.prefix_len};
        if (composing) prefix.tensor = compose(modules, match_weights(tape, x, reps, config.match));
        Var h = encode(tape, backbone, ex.tokens, &prefix);
        Var loss = cross_entropy(head_logits(vars.weight, vars.bias, h), ex.label);
        if (aux) loss = sub(loss, scale(cosine(tape.constant(x), vars.rep), config.aux_weight));
        losses.push_back(loss);
    }
    return sum(stack(losses));
}

TrainedTask train_task(const ModulePool& pool, const TaskData& task, const BackboneParams& backbone,
                       const TrainConfig& config, Method method, PrefixModule* shared) {
    config.validate();
    MOCL_EXPECT(!task.train.empty(), "train_task: task " + std::to_string(task.id) + " has no training data");
    for (const PoolEntry& e : pool.entries())
        MOCL_EXPECT(e.prefix.frozen() && e.rep.frozen(), "train_task: pool entry for task " +
                                                             std::to_string(e.prefix.task_id) + " is not frozen");
    const bool composing = method == Method::mocl_p || method == Method::mocl;
    if (method == Method::seq_ft) {
        MOCL_EXPECT(shared != nullptr && !shared->frozen(), "train_task: seq_ft needs an unfrozen shared module");
        MOCL_EXPECT(shared->prefix_len == config.prefix_len, "train_task: shared module has the wrong prefix length");
    }

    const BackboneConfig& bc = backbone.config;
    const TaskId id = task.id;
    const std::uint64_t seed = config.seed;
    const std::vector<Tensor> xs = input_embeddings(backbone, task.train);

    TrainedTask out;
    out.prefix = shared != nullptr && method == Method::seq_ft
                     ? *shared
                     : init_prefix(bc, config.prefix_len, id, derive_seed(seed, id, "init/prefix"));
    out.head = init_head(bc, task.n_classes(), id, derive_seed(seed, id, "init/head"));
    switch (config.rep_strategy) {
        case RepKind::trainable:
            out.rep = init_feature_vector(bc, bc.d_model, id, derive_seed(seed, id, "init/rep"));
            break;
        case RepKind::gaussian:
            out.rep = fit_gaussian(xs, id);
            break;
        case RepKind::embed_mean:
            out.rep = embed_mean_rep(xs, id);
            break;
    }
    const bool train_rep = composing && config.rep_strategy == RepKind::trainable;

    AdamWHyper hyper;
    hyper.lr = config.lr;
    hyper.weight_decay = config.weight_decay;
    AdamW opt_prefix(hyper), opt_head(hyper), opt_rep(hyper);

    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(seed, id, "shuffle"));

    Tape tape;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        const bool update_rep = train_rep && epoch < config.effective_rep_epochs();
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            tape.reset();
            Var p_m = tape.leaf(out.prefix.tensor.value);
            Var w = tape.leaf(out.head.weight.value);
            Var b = tape.leaf(out.head.bias.value);
            Var v_m = train_rep ? tape.leaf(out.rep.vector.value, update_rep) : Var{};

            std::vector<const Example*> batch;
            std::vector<const Tensor*> batch_x;
            for (std::size_t k = start; k < stop; ++k) {
                batch.push_back(&task.train[order[k]]);
                batch_x.push_back(&xs[order[k]]);
            }
            Var batch_loss =
                batch_objective(tape, pool, out.rep, {p_m, w, b, v_m}, batch, batch_x, backbone, config, method);
            const double lv = batch_loss.value().item();
            if (!std::isfinite(lv))
                throw NumericalError("non-finite loss on task " + std::to_string(id) + ", epoch " +
                                     std::to_string(epoch) + ", batch starting at " + std::to_string(start));
            epoch_loss += lv;
            tape.backward(batch_loss);

            opt_prefix.step({&out.prefix.tensor}, {&tape.grad(p_m)});
            opt_head.step({&out.head.weight, &out.head.bias}, {&tape.grad(w), &tape.grad(b)});
            if (update_rep) opt_rep.step({&out.rep.vector}, {&tape.grad(v_m)});
        }
        out.outcome.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    if (method == Method::seq_ft) shared->tensor.value = out.prefix.tensor.value;

    out.outcome.task_id = id;
    if (config.rep_strategy != RepKind::gaussian) {
        double c = 0.0;
        for (const Tensor& x : xs) c += cosine_value(x, out.rep.vector.value);
        out.outcome.mean_rep_cosine = c / static_cast<double>(xs.size());
    }

    PoolEntry current{out.prefix, out.rep, 0.0};
    EvalTarget target;
    target.match = config.match;
    if (composing) {
        std::vector<const TaskRepresentation*> all;
        for (const PoolEntry& e : pool.entries()) all.push_back(&e.rep);
        all.push_back(&out.rep);
        out.outcome.mean_match_weight = mean_match_weight(all, task.train, backbone, config.match);
        target.pool = &pool;
        target.extra = &current;
    } else {
        out.outcome.mean_match_weight = 1.0;
        target.fixed = &current.prefix;
    }
    out.outcome.train_metrics = evaluate(target, task.train, out.head, backbone);
    if (!task.val.empty()) out.outcome.val_metrics = evaluate(target, task.val, out.head, backbone);
    return out;
}

RunResult run_sequence(const std::vector<TaskData>& tasks, const BackboneParams& backbone, const RunConfig& config) {
    MOCL_EXPECT(!tasks.empty(), "run_sequence: need at least one task");
    config.train.validate();
    config.prune.validate();
    std::vector<TaskId> ids;
    std::set<TaskId> seen;
    for (const TaskData& t : tasks) {
        MOCL_EXPECT(seen.insert(t.id).second, "run_sequence: duplicate task id " + std::to_string(t.id));
        ids.push_back(t.id);
    }

    RunResult r;
    r.accuracy = AccuracyMatrix(ids, MetricKind::accuracy);
    r.macro_f1 = AccuracyMatrix(ids, MetricKind::macro_f1);
    const Method method = config.method;
    if (method == Method::seq_ft) {
        // One module shared by every task; seeded independently of any task id.
        PrefixModule shared = init_prefix(backbone.config, config.train.prefix_len, 0,
                                          derive_seed(config.train.seed, 0, "init/shared_prefix"));
        shared.tensor.name = "prefix_shared";
        r.shared_prefix = std::move(shared);
    }

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const TaskData& task = tasks[i];
        TrainedTask t = train_task(r.pool, task, backbone, config.train, method,
                                   r.shared_prefix ? &*r.shared_prefix : nullptr);
        freeze(t.head);
        FreezeHashes fh;
        fh.head = t.head.hash();
        fh.prefix = t.prefix.hash();
        fh.rep = t.rep.hash();

        PruneVerdict verdict{Decision::kept, false};
        if (method == Method::mocl_p) verdict = prune_decision(t.outcome.mean_match_weight, config.prune, r.pool.size());
        if (verdict.guard_fired)
            log_warn("task " + std::to_string(task.id) + ": mean match weight " +
                     format_double(t.outcome.mean_match_weight) + " is below the threshold but the pool is empty; kept");
        t.outcome.decision = verdict.decision;
        t.outcome.guard_fired = verdict.guard_fired;

        ManifestRecord rec;
        rec.task_id = task.id;
        rec.decision = verdict.decision;
        rec.mean_match_weight = t.outcome.mean_match_weight;
        rec.guard_fired = verdict.guard_fired;
        rec.prefix_hash = hash_hex(fh.prefix);
        rec.rep_hash = hash_hex(fh.rep);
        r.pool.add_record(rec);
        r.pool.add_head(std::move(t.head));

        r.task_reps.push_back(t.rep);
        if (method != Method::seq_ft && verdict.decision == Decision::kept) {
            freeze(t.prefix);
            if (!t.rep.frozen()) freeze(t.rep);
            fh.kept = true;
            r.pool.insert(PoolEntry{std::move(t.prefix), std::move(t.rep), t.outcome.mean_match_weight});
        }
        r.freeze_hashes[task.id] = fh;
        r.outcomes.push_back(std::move(t.outcome));
        r.pool_size_trajectory.push_back(method == Method::seq_ft ? 1 : r.pool.size());

        for (std::size_t j = 0; j <= i; ++j) {
            const TaskData& old = tasks[j];
            EvalTarget target;
            target.match = config.train.match;
            if (method == Method::seq_ft) {
                target.fixed = &*r.shared_prefix;
            } else if (method == Method::per_task_ft) {
                const PoolEntry* e = r.pool.find(old.id);
                MOCL_EXPECT(e != nullptr, "per_task_ft: missing module for task " + std::to_string(old.id));
                target.fixed = &e->prefix;
            } else {
                target.pool = &r.pool;
            }
            const MetricRecord m = evaluate(target, old.test, r.pool.head(old.id), backbone);
            r.accuracy.set(i, j, m.accuracy);
            r.macro_f1.set(i, j, m.macro_f1);
        }
        log_info("task " + std::to_string(task.id) + " done: pool size " + std::to_string(r.pool.size()) +
                 ", diagonal accuracy " + format_double(*r.accuracy.at(i, i)));
    }

    r.params = pool_param_count(r.pool, backbone.config);
    if (r.shared_prefix) {
        r.params.prefix_params += r.shared_prefix->tensor.value.size();
        r.params.total += r.shared_prefix->tensor.value.size();
    }
    return r;
}

}  // namespace mocl
