#include "mocl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "mocl/error.hpp"
#include "mocl/log.hpp"
#include "mocl/rng.hpp"

namespace mocl {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void bad(std::string_view key, const std::string& why) {
    throw ConfigError(std::string(key) + ": " + why);
}

std::uint64_t as_uint(std::string_view key, const json& v) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) bad(key, "must be >= 0, got " + v.dump());
    bad(key, "expected a non-negative integer, got " + v.dump());
}

double as_double(std::string_view key, const json& v) {
    if (!v.is_number()) bad(key, "expected a number, got " + v.dump());
    return v.get<double>();
}

bool as_bool(std::string_view key, const json& v) {
    if (!v.is_boolean()) bad(key, "expected true or false, got " + v.dump());
    return v.get<bool>();
}

std::string as_string(std::string_view key, const json& v) {
    if (!v.is_string()) bad(key, "expected a string, got " + v.dump());
    return v.get<std::string>();
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        out.push_back(item);
    }
    return out;
}

// A list value may be a JSON array, a scalar, or comma-separated text.
std::vector<json> as_list(const json& v) {
    if (v.is_array()) return {v.begin(), v.end()};
    if (v.is_string()) {
        std::vector<json> out;
        for (const std::string& item : split_commas(v.get<std::string>())) {
            json parsed = json::parse(item, nullptr, false);
            out.push_back(parsed.is_discarded() ? json(item) : parsed);
        }
        return out;
    }
    return {v};
}

using Setter = std::function<void(ExperimentConfig&, const json&)>;
using Getter = std::function<ojson(const ExperimentConfig&)>;

struct KeySpec {
    std::string key;
    Setter set;
    Getter get;
};

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs = [] {
        std::vector<KeySpec> s;
        auto add = [&](std::string key, Setter set, Getter get) {
            s.push_back({std::move(key), std::move(set), std::move(get)});
        };
#define MOCL_UINT_KEY(name, field)                                                                   \
    add(                                                                                             \
        name, [](ExperimentConfig& c, const json& v) { c.field = as_uint(name, v); },               \
        [](const ExperimentConfig& c) { return ojson(c.field); })
#define MOCL_DOUBLE_KEY(name, field)                                                                 \
    add(                                                                                             \
        name, [](ExperimentConfig& c, const json& v) { c.field = as_double(name, v); },             \
        [](const ExperimentConfig& c) { return ojson(c.field); })
#define MOCL_BOOL_KEY(name, field)                                                                   \
    add(                                                                                             \
        name, [](ExperimentConfig& c, const json& v) { c.field = as_bool(name, v); },               \
        [](const ExperimentConfig& c) { return ojson(c.field); })

        add(
            "suite", [](ExperimentConfig& c, const json& v) { c.suite = as_string("suite", v); },
            [](const ExperimentConfig& c) { return ojson(c.suite); });
        add(
            "orders",
            [](ExperimentConfig& c, const json& v) {
                c.orders.clear();
                for (const json& item : as_list(v)) c.orders.push_back(as_string("orders", item));
            },
            [](const ExperimentConfig& c) { return ojson(c.orders); });
        add(
            "method",
            [](ExperimentConfig& c, const json& v) {
                try {
                    c.method = parse_method(as_string("method", v));
                } catch (const ContractViolation& e) {
                    bad("method", e.what());
                }
            },
            [](const ExperimentConfig& c) { return ojson(std::string(to_string(c.method))); });
        add(
            "seeds",
            [](ExperimentConfig& c, const json& v) {
                c.seeds.clear();
                for (const json& item : as_list(v)) c.seeds.push_back(as_uint("seeds", item));
            },
            [](const ExperimentConfig& c) { return ojson(c.seeds); });

        MOCL_UINT_KEY("train.epochs", train.epochs);
        MOCL_UINT_KEY("train.batch_size", train.batch_size);
        MOCL_DOUBLE_KEY("train.lr", train.lr);
        MOCL_DOUBLE_KEY("train.weight_decay", train.weight_decay);
        MOCL_DOUBLE_KEY("train.aux_weight", train.aux_weight);
        add(
            "train.rep_strategy",
            [](ExperimentConfig& c, const json& v) {
                try {
                    c.train.rep_strategy = parse_rep_kind(as_string("train.rep_strategy", v));
                } catch (const ContractViolation& e) {
                    bad("train.rep_strategy", e.what());
                }
            },
            [](const ExperimentConfig& c) { return ojson(std::string(to_string(c.train.rep_strategy))); });
        add(
            "train.rep_train_epochs",
            [](ExperimentConfig& c, const json& v) {
                if (v.is_null() || (v.is_string() && v.get<std::string>() == "all"))
                    c.train.rep_train_epochs.reset();
                else
                    c.train.rep_train_epochs = as_uint("train.rep_train_epochs", v);
            },
            [](const ExperimentConfig& c) {
                return c.train.rep_train_epochs ? ojson(*c.train.rep_train_epochs) : ojson(nullptr);
            });
        MOCL_UINT_KEY("train.prefix_len", train.prefix_len);
        MOCL_BOOL_KEY("train.normalize_weights", train.match.normalize);
        MOCL_BOOL_KEY("train.allow_negative_weights", train.match.allow_negative_weights);
        MOCL_DOUBLE_KEY("prune.threshold", prune.threshold);
        MOCL_BOOL_KEY("prune.keep_first_guard", prune.keep_first_guard);
        MOCL_UINT_KEY("backbone.vocab_size", backbone.vocab_size);
        MOCL_UINT_KEY("backbone.d_model", backbone.d_model);
        MOCL_UINT_KEY("backbone.n_layers", backbone.n_layers);
        MOCL_UINT_KEY("backbone.n_heads", backbone.n_heads);
        MOCL_UINT_KEY("backbone.ffn_dim", backbone.ffn_dim);
        MOCL_UINT_KEY("backbone.max_seq_len", backbone.max_seq_len);
        MOCL_DOUBLE_KEY("backbone.embedding_offset", backbone.embedding_offset);
        MOCL_UINT_KEY("backbone.seed", backbone_seed);
#undef MOCL_UINT_KEY
#undef MOCL_DOUBLE_KEY
#undef MOCL_BOOL_KEY
        return s;
    }();
    return specs;
}

const KeySpec* find_key(std::string_view key) {
    for (const KeySpec& k : key_specs())
        if (k.key == key) return &k;
    return nullptr;
}

void set_key(ExperimentConfig& config, std::string_view key, const json& value) {
    if (key == "out") {
        config.out = as_string("out", value);
        return;
    }
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) bad(key, "unknown config key");
    spec->set(config, value);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

ojson metric_json(const MetricRecord& m) {
    ojson j;
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
    j["correct"] = m.correct;
    j["total"] = m.total;
    return j;
}

void write_outcomes(const std::vector<TaskOutcome>& outcomes, const fs::path& path) {
    std::string text;
    for (const TaskOutcome& o : outcomes) {
        ojson j;
        j["task_id"] = o.task_id;
        j["mean_match_weight"] = o.mean_match_weight;
        j["decision"] = std::string(to_string(o.decision));
        j["guard_fired"] = o.guard_fired;
        j["train"] = metric_json(o.train_metrics);
        j["val"] = metric_json(o.val_metrics);
        j["mean_rep_cosine"] = o.mean_rep_cosine;
        j["loss_curve"] = o.loss_curve;
        text += j.dump() + "\n";
    }
    write_text(path, text);
}

void write_representations(const RunResult& r, const fs::path& path) {
    std::string text;
    for (const TaskRepresentation& rep : r.task_reps) {
        const auto it = r.freeze_hashes.find(rep.task_id);
        ojson j;
        j["task_id"] = rep.task_id;
        j["kept"] = it != r.freeze_hashes.end() && it->second.kept;
        j["kind"] = std::string(to_string(rep.kind));
        j["vector"] = rep.vector.value.values();
        if (rep.kind == RepKind::gaussian) j["variance"] = rep.variance.values();
        text += j.dump() + "\n";
    }
    write_text(path, text);
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

ojson run_summary_json(const RunSummary& s) {
    ojson j;
    j["order"] = s.order;
    j["seed"] = s.seed;
    j["avg_accuracy"] = s.avg_accuracy;
    j["avg_macro_f1"] = s.avg_macro_f1;
    j["mean_forgetting"] = s.mean_forgetting;
    j["pool_size"] = s.pool_size;
    j["prefix_params"] = s.params.prefix_params;
    j["rep_params"] = s.params.rep_params;
    j["head_params"] = s.params.head_params;
    j["total_params"] = s.params.total;
    return j;
}

template <typename Fn>
int guarded(const char* command, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::cerr << "mocl " << command << ": config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "mocl " << command << ": error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const KeySpec& s : key_specs()) k.push_back(s.key);
        k.push_back("out");
        return k;
    }();
    return keys;
}

void apply_override(ExperimentConfig& config, std::string_view key, std::string_view text) {
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = std::string(text);
    set_key(config, key, value);
}

ExperimentConfig load_config(const fs::path& path) { return load_config(path, ExperimentConfig{}); }

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config: top level must be an object of dotted keys");
    std::vector<std::string> problems;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        try {
            set_key(base, it.key(), it.value());
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }
    }
    if (!problems.empty()) {
        std::string msg = "invalid config " + path.string() + ":";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
    return base;
}

void validate_config(const ExperimentConfig& config) {
    std::vector<std::string> problems;
    auto check = [&](auto&& fn) {
        try {
            fn();
        } catch (const ContractViolation& e) {
            problems.push_back(e.what());
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        } catch (const ParseError& e) {
            problems.push_back(std::string("suite: ") + e.what());
        }
    };
    check([&] { config.train.validate(); });
    check([&] { config.prune.validate(); });
    check([&] { config.backbone.validate(); });
    if (config.seeds.empty()) problems.push_back("seeds: at least one seed is required");
    if (config.orders.empty()) problems.push_back("orders: at least one order is required");
    if (config.out.empty()) problems.push_back("out: output directory is required");
    check([&] {
        const SuiteDefinition suite = resolve_suite(config);
        validate_suite(suite, config.backbone);
        for (const std::string& o : config.orders)
            if (!suite.orders.contains(o)) bad("orders", "suite '" + suite.name + "' has no order '" + o + "'");
    });
    if (!problems.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
}

std::string config_echo(const ExperimentConfig& config) {
    ojson j;
    for (const KeySpec& s : key_specs()) j[s.key] = s.get(config);
    return j.dump();
}

SuiteDefinition resolve_suite(const ExperimentConfig& config) {
    const auto names = builtin_suite_names();
    if (std::find(names.begin(), names.end(), config.suite) != names.end()) return builtin_suite(config.suite);
    if (fs::is_regular_file(config.suite)) return read_suite(config.suite);
    bad("suite", "'" + config.suite + "' is neither a builtin suite nor a readable descriptor file");
}

BackboneParams make_backbone(const ExperimentConfig& config) {
    return init_backbone(config.backbone, derive_seed(config.backbone_seed, 0, "backbone"));
}

std::string run_dir_name(const std::string& order, std::uint64_t seed) {
    return order + "_seed" + std::to_string(seed);
}

ExperimentSummary run_experiment(const ExperimentConfig& config) {
    validate_config(config);
    const SuiteDefinition suite = resolve_suite(config);
    const BackboneParams backbone = make_backbone(config);
    const std::string echo = config_echo(config);
    fs::create_directories(config.out);

    ExperimentSummary summary;
    std::map<std::string, std::vector<const RunSummary*>> by_order;
    summary.runs.reserve(config.orders.size() * config.seeds.size());
    for (const std::string& order : config.orders) {
        for (std::uint64_t seed : config.seeds) {
            log_info("running " + run_dir_name(order, seed));
            const std::vector<TaskData> tasks = make_sequence({suite, order, seed}, config.backbone);
            RunConfig rc;
            rc.method = config.method;
            rc.train = config.train;
            rc.train.seed = seed;
            rc.prune = config.prune;
            const RunResult r = run_sequence(tasks, backbone, rc);

            RunReport report = finalize(r.accuracy);
            report.pool_size_trajectory = r.pool_size_trajectory;
            report.params = r.params;
            report.config = echo;
            const RunReport f1 = finalize(r.macro_f1);

            const fs::path dir = config.out / run_dir_name(order, seed);
            fs::create_directories(dir);
            write_matrix_csv(r.accuracy, dir / "accuracy.csv");
            write_matrix_csv(r.macro_f1, dir / "macro_f1.csv");
            write_report(report, dir / "report.txt");
            write_manifest(r.pool.records(), dir / "pool_manifest.jsonl");
            write_outcomes(r.outcomes, dir / "outcomes.jsonl");
            write_representations(r, dir / "representations.jsonl");
            write_task_data(tasks, dir / "tasks.jsonl");

            RunSummary s;
            s.order = order;
            s.seed = seed;
            s.avg_accuracy = report.avg;
            s.avg_macro_f1 = f1.avg;
            s.mean_forgetting = mean_of(report.forgetting);
            s.pool_size = r.pool_size_trajectory.back();
            s.params = r.params;
            summary.runs.push_back(s);
        }
    }
    for (const RunSummary& s : summary.runs) by_order[s.order].push_back(&s);

    std::vector<double> acc, f1, pool, params;
    for (const RunSummary& s : summary.runs) {
        acc.push_back(s.avg_accuracy);
        f1.push_back(s.avg_macro_f1);
        pool.push_back(static_cast<double>(s.pool_size));
        params.push_back(static_cast<double>(s.params.total));
    }
    summary.avg_accuracy = mean_of(acc);
    summary.avg_macro_f1 = mean_of(f1);
    summary.pool_size = mean_of(pool);
    summary.total_params = mean_of(params);

    ojson manifest;
    manifest["version"] = kVersion;
    manifest["suite"] = suite.name;
    manifest["backbone_hash"] = hash_hex(backbone.hash());
    manifest["config"] = ojson::parse(echo);
    ojson runs = ojson::array();
    for (const RunSummary& s : summary.runs) runs.push_back(run_dir_name(s.order, s.seed));
    manifest["runs"] = runs;
    write_text(config.out / "manifest.json", manifest.dump(2) + "\n");

    ojson sj;
    sj["metrics_note"] =
        "accuracy and macro-F1 over balanced single-label tasks; micro-F1 equals accuracy there and is omitted";
    sj["method"] = std::string(to_string(config.method));
    sj["suite"] = suite.name;
    ojson jruns = ojson::array();
    for (const RunSummary& s : summary.runs) jruns.push_back(run_summary_json(s));
    sj["runs"] = jruns;
    ojson per_order;
    for (const auto& [order, list] : by_order) {
        std::vector<double> a, b;
        for (const RunSummary* s : list) {
            a.push_back(s->avg_accuracy);
            b.push_back(s->avg_macro_f1);
        }
        per_order[order] = {{"avg_accuracy", mean_of(a)}, {"avg_macro_f1", mean_of(b)}};
    }
    sj["per_order"] = per_order;
    sj["mean"] = {{"avg_accuracy", summary.avg_accuracy},
                  {"avg_macro_f1", summary.avg_macro_f1},
                  {"pool_size", summary.pool_size},
                  {"total_params", summary.total_params}};
    write_text(config.out / "summary.json", sj.dump(2) + "\n");
    return summary;
}

int cmd_run(const ExperimentConfig& config) {
    return guarded("run", [&] {
        validate_config(config);
        run_experiment(config);
        return 0;
    });
}

int cmd_sweep(const ExperimentConfig& config, const std::vector<double>& thresholds) {
    return guarded("sweep", [&] {
        if (thresholds.empty()) throw ConfigError("thresholds: at least one threshold is required");
        if (config.method != Method::mocl_p) throw ConfigError("method: sweep requires mocl_p");
        for (double t : thresholds)
            if (!(t >= -1.0 && t <= 1.0)) throw ConfigError("thresholds: " + format_shortest(t) + " outside [-1, 1]");
        validate_config(config);
        std::string csv = "threshold,avg,pool_size,total_params\n";
        for (double t : thresholds) {
            ExperimentConfig c = config;
            c.prune.threshold = t;
            c.out = config.out / ("threshold_" + format_shortest(t));
            const ExperimentSummary s = run_experiment(c);
            csv += format_shortest(t) + "," + format_shortest(s.avg_accuracy) + "," + format_shortest(s.pool_size) +
                   "," + format_shortest(s.total_params) + "\n";
        }
        write_text(config.out / "sweep.csv", csv);
        return 0;
    });
}

int cmd_ablate(const ExperimentConfig& config, const std::string& axis, const std::vector<std::string>& values) {
    return guarded("ablate", [&] {
        if (axis != "rep_strategy" && axis != "rep_train_epochs")
            throw ConfigError("axis: '" + axis + "' is not one of rep_strategy, rep_train_epochs");
        if (values.empty()) throw ConfigError("values: at least one value is required");
        std::vector<ExperimentConfig> configs;
        for (const std::string& v : values) {
            ExperimentConfig c = config;
            apply_override(c, "train." + axis, v);
            c.out = config.out / (axis + "_" + v);
            validate_config(c);
            configs.push_back(std::move(c));
        }
        std::string csv = axis + ",avg_accuracy,avg_macro_f1,pool_size,total_params\n";
        for (std::size_t i = 0; i < values.size(); ++i) {
            const ExperimentSummary s = run_experiment(configs[i]);
            csv += values[i] + "," + format_shortest(s.avg_accuracy) + "," + format_shortest(s.avg_macro_f1) + "," +
                   format_shortest(s.pool_size) + "," + format_shortest(s.total_params) + "\n";
        }
        write_text(config.out / "ablation.csv", csv);
        return 0;
    });
}

namespace {

void export_one(const fs::path& dir) {
    std::ifstream in(dir / "representations.jsonl", std::ios::binary);
    if (!in) throw ConfigError("export-vectors: " + dir.string() + " has no representations.jsonl");
    std::string csv;
    std::string line;
    std::size_t lineno = 0;
    std::size_t dim = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(std::string("representations: ") + e.what(), lineno);
        }
        const auto v = j.at("vector").get<std::vector<double>>();
        if (csv.empty()) {
            dim = v.size();
            csv = "task_id,kept";
            for (std::size_t d = 0; d < dim; ++d) csv += ",dim_" + std::to_string(d);
            csv += "\n";
        }
        if (v.size() != dim) throw ParseError("representations: inconsistent vector length", lineno);
        csv += std::to_string(j.at("task_id").get<TaskId>()) + "," + (j.at("kept").get<bool>() ? "1" : "0");
        for (double x : v) csv += "," + format_double(x);
        csv += "\n";
    }
    write_text(dir / "vectors.csv", csv);
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

}  // namespace

int cmd_export_vectors(const fs::path& run_dir) {
    return guarded("export-vectors", [&] {
        if (!fs::is_directory(run_dir)) throw ConfigError("no such run directory: " + run_dir.string());
        if (fs::exists(run_dir / "representations.jsonl")) {
            export_one(run_dir);
            return 0;
        }
        const json manifest = read_json_file(run_dir / "manifest.json");
        for (const auto& name : manifest.at("runs")) export_one(run_dir / name.get<std::string>());
        return 0;
    });
}

int cmd_report(const fs::path& run_dir, std::ostream& out) {
    return guarded("report", [&] {
        if (!fs::is_directory(run_dir)) throw ConfigError("no such run directory: " + run_dir.string());
        const json s = read_json_file(run_dir / "summary.json");
        auto num = [](const json& v) { return format_shortest(v.get<double>()); };

        std::vector<std::vector<std::string>> rows;
        rows.push_back({"run", "AVG(acc)", "AVG(macro-F1)", "forgetting", "pool", "params"});
        for (const json& r : s.at("runs")) {
            rows.push_back({run_dir_name(r.at("order").get<std::string>(), r.at("seed").get<std::uint64_t>()),
                            num(r.at("avg_accuracy")), num(r.at("avg_macro_f1")), num(r.at("mean_forgetting")),
                            std::to_string(r.at("pool_size").get<std::size_t>()),
                            std::to_string(r.at("total_params").get<std::size_t>())});
        }
        const json& m = s.at("mean");
        rows.push_back({"mean", num(m.at("avg_accuracy")), num(m.at("avg_macro_f1")), "", num(m.at("pool_size")),
                        num(m.at("total_params"))});
        std::vector<std::size_t> width(rows.front().size(), 0);
        for (const auto& row : rows)
            for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

        out << "suite " << s.at("suite").get<std::string>() << ", method " << s.at("method").get<std::string>()
            << "\n";
        out << s.at("metrics_note").get<std::string>() << "\n\n";
        for (const auto& row : rows) {
            for (std::size_t c = 0; c < row.size(); ++c)
                out << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c]
                    << (c + 1 < row.size() ? "  " : "\n");
        }
        out << "\nper order\n";
        for (auto it = s.at("per_order").begin(); it != s.at("per_order").end(); ++it)
            out << "  " << it.key() << "  AVG(acc) " << num(it.value().at("avg_accuracy")) << "  AVG(macro-F1) "
                << num(it.value().at("avg_macro_f1")) << "\n";
        return 0;
    });
}

}  // namespace mocl
