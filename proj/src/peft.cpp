#include "mocl/peft.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "mocl/error.hpp"
#include "mocl/log.hpp"
#include "mocl/rng.hpp"

namespace mocl {

namespace {

constexpr double kPrefixInitScale = 0.02;

}  // namespace

std::uint64_t TaskHead::hash() const {
    ContentHasher h;
    h.update(weight.value);
    h.update(bias.value);
    return h.digest();
}

PrefixModule init_prefix(const BackboneConfig& config, std::size_t prefix_len, TaskId task_id, std::uint64_t seed) {
    MOCL_EXPECT(prefix_len >= 1, "init_prefix: prefix_len must be >= 1");
    config.validate();
    Rng rng(seed);
    PrefixModule m;
    m.task_id = task_id;
    m.prefix_len = prefix_len;
    m.tensor.name = "prefix_" + std::to_string(task_id);
    m.tensor.value = Tensor({config.n_layers, 2, prefix_len, config.d_model}, 0.0);
    for (double& v : m.tensor.value.data()) v = rng.uniform(-kPrefixInitScale, kPrefixInitScale);
    return m;
}

TaskHead init_head(const BackboneConfig& config, std::size_t n_classes, TaskId task_id, std::uint64_t seed) {
    MOCL_EXPECT(n_classes >= 2, "init_head: n_classes must be >= 2");
    Rng rng(seed);
    TaskHead h;
    h.task_id = task_id;
    h.n_classes = n_classes;
    h.weight.name = "head_weight_" + std::to_string(task_id);
    h.bias.name = "head_bias_" + std::to_string(task_id);
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    h.weight.value = Tensor({n_classes, config.d_model}, 0.0);
    for (double& v : h.weight.value.data()) v = rng.uniform(-bound, bound);
    h.bias.value = Tensor({n_classes}, 0.0);
    return h;
}

Var compose(const std::vector<Var>& modules, Var weights) {
    MOCL_EXPECT(!modules.empty(), "compose: need at least one module");
    MOCL_EXPECT(weights.valid() && weights.value().rank() == 1 && weights.value().size() == modules.size(),
                "compose: weight count does not match module count " + std::to_string(modules.size()));
    return weighted_sum(modules, weights);
}

Tensor compose(const std::vector<const PrefixModule*>& modules, const Tensor& weights) {
    Tape tape;
    std::vector<Var> vars;
    for (const PrefixModule* m : modules) vars.push_back(tape.borrow(m->tensor.value));
    return compose(vars, tape.borrow(weights)).value();
}

namespace {

void freeze_param(Parameter& p) {
    if (p.frozen) {
        log_warn("freeze: '" + p.name + "' is already frozen");
        return;
    }
    p.frozen = true;
}

}  // namespace

void freeze(PrefixModule& module) { freeze_param(module.tensor); }

void freeze(TaskHead& head) {
    if (head.frozen()) {
        log_warn("freeze: head of task " + std::to_string(head.task_id) + " is already frozen");
        return;
    }
    head.weight.frozen = true;
    head.bias.frozen = true;
}

void freeze(TaskRepresentation& rep) { freeze_param(rep.vector); }

std::string_view to_string(Decision d) { return d == Decision::kept ? "kept" : "pruned"; }

void ModulePool::insert(PoolEntry entry) {
    MOCL_EXPECT(entry.prefix.frozen(), "pool insert: prefix module must be frozen");
    MOCL_EXPECT(entry.rep.frozen(), "pool insert: task representation must be frozen");
    MOCL_EXPECT(find(entry.prefix.task_id) == nullptr, "pool insert: task already present");
    if (!entries_.empty()) {
        MOCL_EXPECT(entries_.front().prefix.tensor.value.shape() == entry.prefix.tensor.value.shape(),
                    "pool insert: prefix shape differs from existing pool members");
        MOCL_EXPECT(entries_.front().rep.kind == entry.rep.kind, "pool insert: representation variant differs");
    }
    entries_.push_back(std::move(entry));
}

void ModulePool::add_head(TaskHead head) {
    MOCL_EXPECT(head.frozen(), "pool add_head: head must be frozen");
    MOCL_EXPECT(!heads_.contains(head.task_id), "pool add_head: duplicate head");
    heads_.emplace(head.task_id, std::move(head));
}

void ModulePool::add_record(ManifestRecord record) { records_.push_back(std::move(record)); }

const TaskHead& ModulePool::head(TaskId task) const {
    auto it = heads_.find(task);
    MOCL_EXPECT(it != heads_.end(), "no stored head for task " + std::to_string(task));
    return it->second;
}

const PoolEntry* ModulePool::find(TaskId task) const {
    for (const PoolEntry& e : entries_)
        if (e.prefix.task_id == task) return &e;
    return nullptr;
}

ParamCounts pool_param_count(const ModulePool& pool, const BackboneConfig& config) {
    ParamCounts c;
    for (const PoolEntry& e : pool.entries()) {
        const Shape expected{config.n_layers, 2, e.prefix.prefix_len, config.d_model};
        MOCL_EXPECT(e.prefix.tensor.value.shape() == expected, "pool_param_count: prefix shape does not match config");
        c.prefix_params += config.n_layers * 2 * e.prefix.prefix_len * config.d_model;
        c.rep_params += (e.rep.kind == RepKind::gaussian ? 2 : 1) * config.d_model;
    }
    for (const auto& [id, h] : pool.heads()) c.head_params += h.n_classes * config.d_model + h.n_classes;
    c.total = c.prefix_params + c.rep_params + c.head_params;
    return c;
}

void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const ManifestRecord& r : records) {
        nlohmann::ordered_json j;
        j["task_id"] = r.task_id;
        j["decision"] = std::string(to_string(r.decision));
        j["mean_match_weight"] = r.mean_match_weight;
        j["guard_fired"] = r.guard_fired;
        j["prefix_hash"] = r.prefix_hash;
        j["rep_hash"] = r.rep_hash;
        out << j.dump() << '\n';
    }
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<ManifestRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            r.task_id = j.at("task_id").get<TaskId>();
            const auto d = j.at("decision").get<std::string>();
            if (d != "kept" && d != "pruned") throw ParseError("unknown decision '" + d + "'", lineno);
            r.decision = d == "kept" ? Decision::kept : Decision::pruned;
            r.mean_match_weight = j.at("mean_match_weight").get<double>();
            r.guard_fired = j.at("guard_fired").get<bool>();
            r.prefix_hash = j.at("prefix_hash").get<std::string>();
            r.rep_hash = j.at("rep_hash").get<std::string>();
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("pool manifest: ") + e.what(), lineno);
        }
    }
    return records;
}

}  // namespace mocl
