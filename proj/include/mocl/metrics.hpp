#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mocl/peft.hpp"
#include "mocl/taskrep.hpp"

namespace mocl {

enum class MetricKind { accuracy, macro_f1 };
std::string_view to_string(MetricKind m);
MetricKind parse_metric_kind(std::string_view tag);

struct MetricRecord {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;

    double get(MetricKind m) const { return m == MetricKind::accuracy ? accuracy : macro_f1; }

    friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

/// Integer confusion counts for one evaluation; merging is order-independent.
struct ConfusionCounts {
    explicit ConfusionCounts(std::size_t n_classes = 2) : k(n_classes), cells(n_classes * n_classes, 0) {}

    void add(std::size_t label, std::size_t predicted) { ++cells[label * k + predicted]; }
    void merge(const ConfusionCounts& other);
    MetricRecord metrics() const;

    std::size_t k;
    std::vector<std::uint64_t> cells;  // [label, predicted]
};

MetricRecord score_predictions(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predicted,
                               std::size_t n_classes);

/// Lower-triangular task-by-task score matrix: entry (i, j) is the score on task j
/// after finishing training on task i, defined for j <= i.
class AccuracyMatrix {
 public:
    AccuracyMatrix() = default;
    AccuracyMatrix(std::vector<TaskId> task_ids, MetricKind metric);

    void set(std::size_t row, std::size_t col, double value);
    std::optional<double> at(std::size_t row, std::size_t col) const;
    std::size_t size() const noexcept { return task_ids_.size(); }
    bool row_complete(std::size_t row) const;
    bool complete() const;
    const std::vector<TaskId>& task_ids() const noexcept { return task_ids_; }
    MetricKind metric() const noexcept { return metric_; }

    friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
    std::vector<TaskId> task_ids_;
    MetricKind metric_ = MetricKind::accuracy;
    std::vector<std::optional<double>> cells_;
};

inline constexpr int kReportFormatVersion = 1;

struct RunReport {
    int format_version = kReportFormatVersion;
    MetricKind metric = MetricKind::accuracy;
    std::vector<TaskId> task_ids;
    double avg = 0.0;
    std::vector<double> forgetting;  // per task, in sequence order
    std::vector<std::size_t> pool_size_trajectory;
    ParamCounts params;
    std::string config;  // serialized config echo
    AccuracyMatrix matrix;

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// AVG = mean of the final row; F[j] = max_{i >= j} A[i][j] - A[N-1][j].
RunReport finalize(const AccuracyMatrix& matrix);

void write_report(const RunReport& report, const std::filesystem::path& path);
/// Throws ParseError (with line number) on malformed or truncated input.
RunReport read_report(const std::filesystem::path& path);

/// Header `after_task,<id>...`; undefined cells are empty; values use 17 significant digits.
void write_matrix_csv(const AccuracyMatrix& matrix, const std::filesystem::path& path);
AccuracyMatrix read_matrix_csv(const std::filesystem::path& path, MetricKind metric);

/// Decimal text that round-trips a double exactly.
std::string format_double(double v);
/// Shortest decimal text that round-trips a double exactly.
std::string format_shortest(double v);

}  // namespace mocl
