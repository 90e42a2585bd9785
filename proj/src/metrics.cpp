#include "mocl/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mocl/error.hpp"

namespace mocl {

std::string_view to_string(MetricKind m) { return m == MetricKind::accuracy ? "accuracy" : "macro_f1"; }

MetricKind parse_metric_kind(std::string_view tag) {
    if (tag == "accuracy") return MetricKind::accuracy;
    if (tag == "macro_f1") return MetricKind::macro_f1;
    throw ContractViolation("unknown metric '" + std::string(tag) + "'");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_shortest(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------

void ConfusionCounts::merge(const ConfusionCounts& other) {
    MOCL_EXPECT(other.k == k, "confusion counts: class count mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] += other.cells[i];
}

MetricRecord ConfusionCounts::metrics() const {
    MetricRecord r;
    std::vector<std::uint64_t> support(k, 0), predicted(k, 0);
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t p = 0; p < k; ++p) {
            const std::uint64_t c = cells[a * k + p];
            support[a] += c;
            predicted[p] += c;
            r.total += c;
            if (a == p) r.correct += c;
        }
    }
    r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
    // Per-class F1 = 2TP / (2TP + FP + FN); a class with no support and no predictions scores 0.
    double f1_sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        const double tp = static_cast<double>(cells[c * k + c]);
        const double denom = static_cast<double>(support[c] + predicted[c]);
        f1_sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    r.macro_f1 = f1_sum / static_cast<double>(k);
    return r;
}

MetricRecord score_predictions(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predicted,
                               std::size_t n_classes) {
    MOCL_EXPECT(labels.size() == predicted.size(), "score_predictions: length mismatch");
    ConfusionCounts cc(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        MOCL_EXPECT(labels[i] < n_classes && predicted[i] < n_classes, "score_predictions: class out of range");
        cc.add(labels[i], predicted[i]);
    }
    return cc.metrics();
}

// ---------------------------------------------------------------------------

AccuracyMatrix::AccuracyMatrix(std::vector<TaskId> task_ids, MetricKind metric)
    : task_ids_(std::move(task_ids)), metric_(metric), cells_(task_ids_.size() * task_ids_.size()) {}

void AccuracyMatrix::set(std::size_t row, std::size_t col, double value) {
    MOCL_EXPECT(row < size() && col <= row, "accuracy matrix: entry (" + std::to_string(row) + "," +
                                                std::to_string(col) + ") outside the lower triangle");
    MOCL_EXPECT(value >= 0.0 && value <= 1.0, "accuracy matrix: value must lie in [0, 1]");
    cells_[row * size() + col] = value;
}

std::optional<double> AccuracyMatrix::at(std::size_t row, std::size_t col) const {
    if (row >= size() || col >= size()) return std::nullopt;
    return cells_[row * size() + col];
}

bool AccuracyMatrix::row_complete(std::size_t row) const {
    for (std::size_t j = 0; j <= row; ++j)
        if (!cells_[row * size() + j]) return false;
    return true;
}

bool AccuracyMatrix::complete() const {
    for (std::size_t i = 0; i < size(); ++i)
        if (!row_complete(i)) return false;
    return size() > 0;
}

RunReport finalize(const AccuracyMatrix& matrix) {
    MOCL_EXPECT(matrix.complete(), "finalize: accuracy matrix is incomplete");
    const std::size_t n = matrix.size();
    RunReport r;
    r.metric = matrix.metric();
    r.task_ids = matrix.task_ids();
    r.matrix = matrix;
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += *matrix.at(n - 1, j);
    r.avg = total / static_cast<double>(n);
    r.forgetting.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        double best = *matrix.at(j, j);
        for (std::size_t i = j + 1; i < n; ++i) best = std::max(best, *matrix.at(i, j));
        r.forgetting[j] = best - *matrix.at(n - 1, j);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Report text format: one `key value...` record per line, terminated by `end`.

namespace {

template <typename T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (const auto& x : v) {
        s += ' ';
        if constexpr (std::is_floating_point_v<T>)
            s += format_double(x);
        else
            s += std::to_string(x);
    }
    return s;
}

double parse_double(const std::string& tok, std::size_t line) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size() || errno == ERANGE)
        throw ParseError("invalid number '" + tok + "'", line);
    return v;
}

std::uint64_t parse_uint(const std::string& tok, std::size_t line) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
        throw ParseError("invalid integer '" + tok + "'", line);
    return std::stoull(tok);
}

}  // namespace

void write_report(const RunReport& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "format_version " << r.format_version << '\n';
    out << "metric " << to_string(r.metric) << '\n';
    out << "task_ids" << join(r.task_ids) << '\n';
    out << "avg " << format_double(r.avg) << '\n';
    out << "forgetting" << join(r.forgetting) << '\n';
    out << "pool_size_trajectory" << join(r.pool_size_trajectory) << '\n';
    out << "params " << r.params.prefix_params << ' ' << r.params.rep_params << ' ' << r.params.head_params << ' '
        << r.params.total << '\n';
    out << "config " << r.config << '\n';
    for (std::size_t i = 0; i < r.matrix.size(); ++i) {
        out << "row";
        for (std::size_t j = 0; j < r.matrix.size(); ++j) {
            const auto v = r.matrix.at(i, j);
            out << ' ' << (v ? format_double(*v) : "-");
        }
        out << '\n';
    }
    out << "end\n";
}

RunReport read_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open report " + path.string(), 0);
    RunReport r;
    std::string line;
    std::size_t lineno = 0;
    std::size_t row = 0;
    bool ended = false;
    bool have_ids = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (ended) throw ParseError("content after end marker", lineno);
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        std::vector<std::string> toks;
        if (key == "config") {
            r.config = line.size() > 7 ? line.substr(7) : "";
            continue;
        }
        for (std::string t; ss >> t;) toks.push_back(t);
        if (key == "format_version") {
            if (toks.size() != 1) throw ParseError("format_version expects one value", lineno);
            r.format_version = static_cast<int>(parse_uint(toks[0], lineno));
            if (r.format_version != kReportFormatVersion)
                throw ParseError("unsupported format_version " + toks[0], lineno);
        } else if (key == "metric") {
            if (toks.size() != 1) throw ParseError("metric expects one value", lineno);
            try {
                r.metric = parse_metric_kind(toks[0]);
            } catch (const ContractViolation& e) {
                throw ParseError(e.what(), lineno);
            }
        } else if (key == "task_ids") {
            for (const auto& t : toks) r.task_ids.push_back(static_cast<TaskId>(parse_uint(t, lineno)));
            r.matrix = AccuracyMatrix(r.task_ids, r.metric);
            have_ids = true;
        } else if (key == "avg") {
            if (toks.size() != 1) throw ParseError("avg expects one value", lineno);
            r.avg = parse_double(toks[0], lineno);
        } else if (key == "forgetting") {
            for (const auto& t : toks) r.forgetting.push_back(parse_double(t, lineno));
        } else if (key == "pool_size_trajectory") {
            for (const auto& t : toks) r.pool_size_trajectory.push_back(parse_uint(t, lineno));
        } else if (key == "params") {
            if (toks.size() != 4) throw ParseError("params expects four values", lineno);
            r.params.prefix_params = parse_uint(toks[0], lineno);
            r.params.rep_params = parse_uint(toks[1], lineno);
            r.params.head_params = parse_uint(toks[2], lineno);
            r.params.total = parse_uint(toks[3], lineno);
        } else if (key == "row") {
            if (!have_ids) throw ParseError("matrix row before task_ids", lineno);
            if (row >= r.matrix.size() || toks.size() != r.matrix.size())
                throw ParseError("matrix row has wrong shape", lineno);
            for (std::size_t j = 0; j < toks.size(); ++j) {
                if (toks[j] == "-") continue;
                try {
                    r.matrix.set(row, j, parse_double(toks[j], lineno));
                } catch (const ContractViolation& e) {
                    throw ParseError(e.what(), lineno);
                }
            }
            ++row;
        } else if (key == "end") {
            ended = true;
        } else {
            throw ParseError("unknown key '" + key + "'", lineno);
        }
    }
    if (!ended) throw ParseError("truncated report (missing end marker)", lineno + 1);
    if (row != r.matrix.size()) throw ParseError("report has " + std::to_string(row) + " matrix rows", lineno);
    return r;
}

void write_matrix_csv(const AccuracyMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "after_task";
    for (TaskId id : m.task_ids()) out << ',' << id;
    out << '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
        out << m.task_ids()[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            out << ',';
            if (auto v = m.at(i, j)) out << format_double(*v);
        }
        out << '\n';
    }
}

AccuracyMatrix read_matrix_csv(const std::filesystem::path& path, MetricKind metric) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open matrix " + path.string(), 0);
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::string cell;
        std::istringstream ss(line);
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!line.empty() && line.back() == ',') out.emplace_back();
        return out;
    };
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty matrix file", 1);
    auto header = split(line);
    if (header.empty() || header[0] != "after_task") throw ParseError("missing after_task header", 1);
    std::vector<TaskId> ids;
    for (std::size_t k = 1; k < header.size(); ++k) ids.push_back(static_cast<TaskId>(parse_uint(header[k], 1)));
    AccuracyMatrix m(ids, metric);
    std::size_t row = 0;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        auto cells = split(line);
        if (row >= ids.size() || cells.size() != ids.size() + 1) throw ParseError("matrix row has wrong shape", lineno);
        if (parse_uint(cells[0], lineno) != ids[row]) throw ParseError("row task id out of order", lineno);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            if (cells[j + 1].empty()) continue;
            try {
                m.set(row, j, parse_double(cells[j + 1], lineno));
            } catch (const ContractViolation& e) {
                throw ParseError(e.what(), lineno);
            }
        }
        ++row;
    }
    if (row != ids.size()) throw ParseError("matrix has " + std::to_string(row) + " rows", lineno + 1);
    return m;
}

}  // namespace mocl
