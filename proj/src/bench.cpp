#include "mocl/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

#include "mocl/error.hpp"
#include "mocl/rng.hpp"

namespace mocl {

using nlohmann::ordered_json;

std::string_view to_string(Rule r) {
    switch (r) {
        case Rule::marker_presence:
            return "marker_presence";
        case Rule::majority_token:
            return "majority_token";
        case Rule::position_rule:
            return "position_rule";
    }
    return "?";
}

std::string_view to_string(Relation r) {
    switch (r) {
        case Relation::fresh:
            return "fresh";
        case Relation::clone_of:
            return "clone_of";
        case Relation::perturbed:
            return "perturbed";
    }
    return "?";
}

Rule parse_rule(std::string_view tag) {
    if (tag == "marker_presence") return Rule::marker_presence;
    if (tag == "majority_token") return Rule::majority_token;
    if (tag == "position_rule") return Rule::position_rule;
    throw ContractViolation("unknown rule '" + std::string(tag) + "'");
}

Relation parse_relation(std::string_view tag) {
    if (tag == "fresh") return Relation::fresh;
    if (tag == "clone_of") return Relation::clone_of;
    if (tag == "perturbed") return Relation::perturbed;
    throw ContractViolation("unknown relation '" + std::string(tag) + "'");
}

// ---------------------------------------------------------------------------

std::vector<TokenId> GeneratorParams::filler() const {
    std::vector<TokenId> out;
    for (TokenId t : token_subset)
        if (std::find(designated.begin(), designated.end(), t) == designated.end()) out.push_back(t);
    return out;
}

namespace {

constexpr std::size_t kMajorityMaxMinor = 2;  // minority count in [0, 2]
constexpr std::size_t kMajorityMaxLead = 3;   // majority leads by [1, 3]

}  // namespace

void GeneratorParams::validate(const BackboneConfig& config) const {
    MOCL_EXPECT(n_classes >= 2, "task: n_classes must be >= 2");
    MOCL_EXPECT(seq_len >= 1 && seq_len <= config.max_seq_len, "task: seq_len must lie in [1, max_seq_len]");
    std::set<TokenId> subset(token_subset.begin(), token_subset.end());
    MOCL_EXPECT(subset.size() == token_subset.size(), "task: token_subset contains duplicates");
    for (TokenId t : token_subset)
        MOCL_EXPECT(t != kPadToken && t < config.vocab_size, "task: token_subset id out of vocabulary or pad");
    for (TokenId t : designated) MOCL_EXPECT(subset.contains(t), "task: designated tokens must lie in token_subset");
    MOCL_EXPECT(std::set<TokenId>(designated.begin(), designated.end()).size() == designated.size(),
                "task: designated tokens contain duplicates");
    MOCL_EXPECT(filler().size() >= 2, "task: token_subset too small for rule (need >= 2 non-designated tokens)");
    switch (rule) {
        case Rule::marker_presence:
            MOCL_EXPECT(designated.size() == n_classes, "marker_presence: need one marker per class");
            MOCL_EXPECT(seq_len >= 2, "marker_presence: seq_len must be >= 2");
            break;
        case Rule::majority_token:
            MOCL_EXPECT(n_classes == 2 && designated.size() == 2, "majority_token: needs exactly one token pair");
            MOCL_EXPECT(seq_len >= 2 * kMajorityMaxMinor + kMajorityMaxLead,
                        "majority_token: seq_len too short for the count range");
            break;
        case Rule::position_rule:
            MOCL_EXPECT(designated.size() == n_classes, "position_rule: need one class token per class");
            MOCL_EXPECT(position < seq_len, "position_rule: position must be < seq_len");
            break;
    }
}

std::uint64_t TaskData::hash() const {
    ContentHasher h;
    h.update(static_cast<std::uint64_t>(id));
    for (const auto* split : {&train, &val, &test}) {
        h.update(static_cast<std::uint64_t>(split->size()));
        for (const Example& e : *split) {
            h.update(e.tokens.data(), e.tokens.size() * sizeof(TokenId));
            h.update(static_cast<std::uint64_t>(e.label));
        }
    }
    return h.digest();
}

const TaskDescriptor& SuiteDefinition::descriptor(TaskId id) const {
    for (const TaskDescriptor& d : tasks)
        if (d.id == id) return d;
    throw ContractViolation("suite '" + name + "' has no task " + std::to_string(id));
}

GeneratorParams resolve_params(const SuiteDefinition& suite, TaskId id, const BackboneConfig& config) {
    std::vector<TaskId> chain;
    const TaskDescriptor* d = &suite.descriptor(id);
    while (d->relation != Relation::fresh) {
        MOCL_EXPECT(std::find(chain.begin(), chain.end(), d->id) == chain.end(),
                    "suite: relation cycle through task " + std::to_string(d->id));
        chain.push_back(d->id);
        d = &suite.descriptor(d->source);
    }
    GeneratorParams params = d->params;
    // Apply perturbations from the root outwards.
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        const TaskDescriptor& link = suite.descriptor(*it);
        if (link.relation != Relation::perturbed) continue;
        MOCL_EXPECT(link.swap_fraction >= 0.0 && link.swap_fraction <= 0.5,
                    "perturbed: swap_fraction must lie in [0, 0.5]");
        // Only filler tokens are swapped, so the rule's designated tokens carry over.
        std::vector<TokenId> filler = params.filler();
        const auto n_swap = std::min<std::size_t>(
            filler.size(),
            static_cast<std::size_t>(std::floor(link.swap_fraction * static_cast<double>(params.token_subset.size()) +
                                                1e-9)));
        if (n_swap == 0) continue;
        std::set<TokenId> used(params.token_subset.begin(), params.token_subset.end());
        std::vector<TokenId> unused;
        for (TokenId t = kPadToken + 1; t < config.vocab_size; ++t)
            if (!used.contains(t)) unused.push_back(t);
        MOCL_EXPECT(unused.size() >= n_swap, "perturbed: not enough unused vocabulary ids to swap");
        Rng rng(derive_seed(0, link.id, "perturb"));
        rng.shuffle(filler);
        rng.shuffle(unused);
        for (std::size_t i = 0; i < n_swap; ++i)
            std::replace(params.token_subset.begin(), params.token_subset.end(), filler[i], unused[i]);
    }
    params.validate(config);
    return params;
}

namespace {

std::vector<Example> generate_split(const GeneratorParams& p, std::size_t n, Rng& rng) {
    const std::vector<TokenId> filler = p.filler();
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % p.n_classes;
    rng.shuffle(labels);

    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t label : labels) {
        Example e;
        e.label = label;
        e.tokens.resize(p.seq_len);
        for (TokenId& t : e.tokens) t = filler[rng.below(filler.size())];
        std::vector<std::size_t> slots(p.seq_len);
        for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
        switch (p.rule) {
            case Rule::marker_presence: {
                rng.shuffle(slots);
                const std::size_t occurrences = 1 + rng.below(2);
                for (std::size_t i = 0; i < std::min(occurrences, slots.size()); ++i)
                    e.tokens[slots[i]] = p.designated[label];
                break;
            }
            case Rule::majority_token: {
                rng.shuffle(slots);
                const std::size_t minor = rng.below(kMajorityMaxMinor + 1);
                const std::size_t major = minor + 1 + rng.below(kMajorityMaxLead);
                const TokenId winner = p.designated[label];
                const TokenId loser = p.designated[1 - label];
                std::size_t s = 0;
                for (std::size_t i = 0; i < major; ++i) e.tokens[slots[s++]] = winner;
                for (std::size_t i = 0; i < minor; ++i) e.tokens[slots[s++]] = loser;
                break;
            }
            case Rule::position_rule:
                e.tokens[p.position] = p.designated[label];
                break;
        }
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

TaskData generate_task(const TaskDescriptor& descriptor, const GeneratorParams& params, std::uint64_t seed) {
    TaskData data;
    data.id = descriptor.id;
    data.params = params;
    Rng train_rng(derive_seed(seed, descriptor.id, "data/train"));
    Rng val_rng(derive_seed(seed, descriptor.id, "data/val"));
    Rng test_rng(derive_seed(seed, descriptor.id, "data/test"));
    data.train = generate_split(params, descriptor.sizes.train, train_rng);
    data.val = generate_split(params, descriptor.sizes.val, val_rng);
    data.test = generate_split(params, descriptor.sizes.test, test_rng);
    return data;
}

TaskData generate_task(const TaskDescriptor& descriptor, std::uint64_t seed) {
    MOCL_EXPECT(descriptor.relation == Relation::fresh,
                "generate_task: non-fresh descriptors need resolved generator params");
    return generate_task(descriptor, descriptor.params, seed);
}

std::optional<std::size_t> rule_label(const GeneratorParams& p, const std::vector<TokenId>& tokens) {
    switch (p.rule) {
        case Rule::marker_presence: {
            std::optional<std::size_t> found;
            for (std::size_t k = 0; k < p.designated.size(); ++k) {
                if (std::find(tokens.begin(), tokens.end(), p.designated[k]) == tokens.end()) continue;
                if (found) return std::nullopt;
                found = k;
            }
            return found;
        }
        case Rule::majority_token: {
            const auto a = std::count(tokens.begin(), tokens.end(), p.designated[0]);
            const auto b = std::count(tokens.begin(), tokens.end(), p.designated[1]);
            if (a == b) return std::nullopt;
            return a > b ? 0 : 1;
        }
        case Rule::position_rule: {
            if (p.position >= tokens.size()) return std::nullopt;
            auto it = std::find(p.designated.begin(), p.designated.end(), tokens[p.position]);
            if (it == p.designated.end()) return std::nullopt;
            return static_cast<std::size_t>(it - p.designated.begin());
        }
    }
    return std::nullopt;
}

void validate_suite(const SuiteDefinition& suite, const BackboneConfig& config) {
    MOCL_EXPECT(!suite.tasks.empty(), "suite '" + suite.name + "' has no tasks");
    std::set<TaskId> ids;
    for (const TaskDescriptor& d : suite.tasks) {
        MOCL_EXPECT(ids.insert(d.id).second, "suite '" + suite.name + "': duplicate task id " + std::to_string(d.id));
    }
    for (const TaskDescriptor& d : suite.tasks) {
        if (d.relation == Relation::perturbed)
            MOCL_EXPECT(d.swap_fraction >= 0.0 && d.swap_fraction <= 0.5,
                        "perturbed: swap_fraction must lie in [0, 0.5]");
        resolve_params(suite, d.id, config);
    }
    MOCL_EXPECT(!suite.orders.empty(), "suite '" + suite.name + "' defines no orders");
    for (const auto& [label, order] : suite.orders) {
        std::vector<TaskId> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        MOCL_EXPECT(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                    "suite order " + label + ": duplicate task id");
        for (TaskId id : order)
            MOCL_EXPECT(ids.contains(id), "suite order " + label + ": unknown task " + std::to_string(id));
    }
}

std::vector<TaskData> make_sequence(const SequenceSpec& spec, const BackboneConfig& config) {
    validate_suite(spec.suite, config);
    auto it = spec.suite.orders.find(spec.order);
    MOCL_EXPECT(it != spec.suite.orders.end(), "suite '" + spec.suite.name + "' has no order '" + spec.order + "'");
    std::vector<TaskData> tasks;
    for (TaskId id : it->second) {
        const TaskDescriptor& d = spec.suite.descriptor(id);
        tasks.push_back(generate_task(d, resolve_params(spec.suite, id, config), spec.seed));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Builtin suites

namespace {

constexpr std::size_t kSubsetSize = 12;
constexpr std::size_t kSeqLen = 12;

std::vector<TokenId> token_range(TokenId first, std::size_t n) {
    std::vector<TokenId> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = first + static_cast<TokenId>(i);
    return out;
}

TaskDescriptor fresh_task(TaskId id, Rule rule, TokenId first_token, std::size_t n_classes = 2) {
    TaskDescriptor d;
    d.id = id;
    d.relation = Relation::fresh;
    d.params.rule = rule;
    d.params.token_subset = token_range(first_token, kSubsetSize);
    d.params.n_classes = n_classes;
    d.params.seq_len = kSeqLen;
    d.params.designated.assign(d.params.token_subset.begin(),
                               d.params.token_subset.begin() + static_cast<std::ptrdiff_t>(n_classes));
    if (rule == Rule::position_rule) d.params.position = 3;
    return d;
}

TaskDescriptor related_task(TaskId id, Relation relation, TaskId source, double swap_fraction = 0.0) {
    TaskDescriptor d;
    d.id = id;
    d.relation = relation;
    d.source = source;
    d.swap_fraction = swap_fraction;
    return d;
}

std::vector<TaskId> iota_ids(std::size_t n) {
    std::vector<TaskId> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<TaskId>(i);
    return v;
}

}  // namespace

SuiteDefinition clone_suite(std::size_t n) {
    MOCL_EXPECT(n >= 1, "clone_suite: n must be >= 1");
    SuiteDefinition s;
    s.name = "clone_suite";
    s.tasks.push_back(fresh_task(0, Rule::marker_presence, 1));
    for (std::size_t i = 1; i < n; ++i) s.tasks.push_back(related_task(static_cast<TaskId>(i), Relation::clone_of, 0));
    std::vector<TaskId> o1 = iota_ids(n);
    std::vector<TaskId> o2(o1.rbegin(), o1.rend());
    std::vector<TaskId> o3;
    for (std::size_t i = 1; i < n; i += 2) o3.push_back(static_cast<TaskId>(i));
    for (std::size_t i = 0; i < n; i += 2) o3.push_back(static_cast<TaskId>(i));
    s.orders = {{"O1", o1}, {"O2", o2}, {"O3", o3}};
    return s;
}

SuiteDefinition disjoint_suite(std::size_t n) {
    MOCL_EXPECT(n >= 1 && n * kSubsetSize < 64, "disjoint_suite: n must lie in [1, 5]");
    const Rule rules[] = {Rule::marker_presence, Rule::majority_token, Rule::position_rule};
    SuiteDefinition s;
    s.name = "disjoint_suite";
    for (std::size_t i = 0; i < n; ++i)
        s.tasks.push_back(fresh_task(static_cast<TaskId>(i), rules[i % 3], static_cast<TokenId>(1 + i * kSubsetSize)));
    std::vector<TaskId> o1 = iota_ids(n);
    std::vector<TaskId> o2(o1.rbegin(), o1.rend());
    std::vector<TaskId> o3;
    for (std::size_t i = 0; i < n; i += 2) o3.push_back(static_cast<TaskId>(i));
    for (std::size_t i = 1; i < n; i += 2) o3.push_back(static_cast<TaskId>(i));
    s.orders = {{"O1", o1}, {"O2", o2}, {"O3", o3}};
    return s;
}

SuiteDefinition mixed_suite() {
    SuiteDefinition s;
    s.name = "mixed_suite";
    s.tasks.push_back(fresh_task(0, Rule::marker_presence, 1));
    s.tasks.push_back(fresh_task(1, Rule::majority_token, 13));
    s.tasks.push_back(fresh_task(2, Rule::position_rule, 25));
    s.tasks.push_back(fresh_task(3, Rule::marker_presence, 37, 3));
    for (TaskId i = 0; i < 4; ++i) s.tasks.push_back(related_task(4 + i, Relation::perturbed, i, 0.25));
    for (TaskId i = 0; i < 4; ++i) s.tasks.push_back(related_task(8 + i, Relation::clone_of, i));
    s.orders = {{"O1", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}},
                {"O2", {0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11}},
                {"O3", {3, 2, 1, 0, 7, 6, 5, 4, 11, 10, 9, 8}}};
    return s;
}

std::vector<std::string> builtin_suite_names() { return {"clone_suite", "disjoint_suite", "mixed_suite"}; }

SuiteDefinition builtin_suite(const std::string& name) {
    if (name == "clone_suite") return clone_suite();
    if (name == "disjoint_suite") return disjoint_suite();
    if (name == "mixed_suite") return mixed_suite();
    throw ContractViolation("unknown suite '" + name + "' (expected clone_suite, disjoint_suite or mixed_suite)");
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ordered_json descriptor_to_json(const TaskDescriptor& d) {
    ordered_json j;
    j["id"] = d.id;
    j["relation"] = std::string(to_string(d.relation));
    if (d.relation == Relation::fresh) {
        j["rule"] = std::string(to_string(d.params.rule));
        j["n_classes"] = d.params.n_classes;
        j["token_subset"] = d.params.token_subset;
        j["designated"] = d.params.designated;
        if (d.params.rule == Rule::position_rule) j["position"] = d.params.position;
        j["seq_len"] = d.params.seq_len;
    } else {
        j["source"] = d.source;
        if (d.relation == Relation::perturbed) j["swap_fraction"] = d.swap_fraction;
    }
    j["sizes"] = {{"train", d.sizes.train}, {"val", d.sizes.val}, {"test", d.sizes.test}};
    return j;
}

TaskDescriptor descriptor_from_json(const nlohmann::json& j) {
    TaskDescriptor d;
    d.id = j.at("id").get<TaskId>();
    d.relation = parse_relation(j.at("relation").get<std::string>());
    if (d.relation == Relation::fresh) {
        d.params.rule = parse_rule(j.at("rule").get<std::string>());
        d.params.n_classes = j.at("n_classes").get<std::size_t>();
        d.params.token_subset = j.at("token_subset").get<std::vector<TokenId>>();
        d.params.designated = j.at("designated").get<std::vector<TokenId>>();
        d.params.position = j.value("position", std::size_t{0});
        d.params.seq_len = j.value("seq_len", kSeqLen);
    } else {
        d.source = j.at("source").get<TaskId>();
        d.swap_fraction = j.value("swap_fraction", 0.0);
    }
    if (j.contains("sizes")) {
        const auto& s = j.at("sizes");
        d.sizes.train = s.value("train", d.sizes.train);
        d.sizes.val = s.value("val", d.sizes.val);
        d.sizes.test = s.value("test", d.sizes.test);
    }
    return d;
}

}  // namespace

void write_suite(const SuiteDefinition& suite, const std::filesystem::path& path) {
    ordered_json j;
    j["name"] = suite.name;
    ordered_json orders = ordered_json::object();
    for (const auto& [label, order] : suite.orders) orders[label] = order;
    j["orders"] = orders;
    j["tasks"] = ordered_json::array();
    for (const TaskDescriptor& d : suite.tasks) j["tasks"].push_back(descriptor_to_json(d));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

SuiteDefinition read_suite(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    MOCL_EXPECT(static_cast<bool>(in), "suite file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("suite " + path.string() + ": " + e.what(), 0);
    }
    try {
        SuiteDefinition s;
        s.name = j.at("name").get<std::string>();
        for (const auto& [label, order] : j.at("orders").items()) s.orders[label] = order.get<std::vector<TaskId>>();
        for (const auto& t : j.at("tasks")) s.tasks.push_back(descriptor_from_json(t));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("suite " + path.string() + ": " + e.what());
    }
}

void write_task_data(const std::vector<TaskData>& tasks, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const TaskData& t : tasks) {
        const std::pair<const char*, const std::vector<Example>*> splits[] = {
            {"train", &t.train}, {"val", &t.val}, {"test", &t.test}};
        for (const auto& [name, split] : splits) {
            for (const Example& e : *split) {
                ordered_json j;
                j["task_id"] = t.id;
                j["split"] = name;
                j["token_ids"] = e.tokens;
                j["label"] = e.label;
                out << j.dump() << '\n';
            }
        }
    }
}

std::vector<TaskData> read_task_data(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<TaskData> tasks;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("task_id").get<TaskId>();
            auto it = std::find_if(tasks.begin(), tasks.end(), [id](const TaskData& t) { return t.id == id; });
            if (it == tasks.end()) {
                tasks.emplace_back();
                tasks.back().id = id;
                it = tasks.end() - 1;
            }
            Example e{j.at("token_ids").get<std::vector<TokenId>>(), j.at("label").get<std::size_t>()};
            const auto split = j.at("split").get<std::string>();
            if (split == "train")
                it->train.push_back(std::move(e));
            else if (split == "val")
                it->val.push_back(std::move(e));
            else if (split == "test")
                it->test.push_back(std::move(e));
            else
                throw ParseError("unknown split '" + split + "'", lineno);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("task data: ") + e.what(), lineno);
        }
    }
    return tasks;
}

}  // namespace mocl
