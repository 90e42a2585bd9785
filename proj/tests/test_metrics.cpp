#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include "mocl/error.hpp"
#include "mocl/metrics.hpp"
#include "support.hpp"

using namespace mocl;
using testing_support::scratch_dir;

namespace {

AccuracyMatrix filled(const std::vector<std::vector<double>>& rows, MetricKind m = MetricKind::accuracy) {
    std::vector<TaskId> ids(rows.size());
    std::iota(ids.begin(), ids.end(), 0);
    AccuracyMatrix a(ids, m);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j <= i; ++j) a.set(i, j, rows[i][j]);
    return a;
}

AccuracyMatrix random_matrix(Rng& rng, std::size_t n, std::vector<TaskId> ids) {
    AccuracyMatrix a(std::move(ids), MetricKind::accuracy);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) a.set(i, j, rng.uniform01());
    return a;
}

}  // namespace

TEST(Finalize, ConstantMatrix) {
    const RunReport r = finalize(filled({{0.8}, {0.8, 0.8}, {0.8, 0.8, 0.8}}));
    EXPECT_NEAR(r.avg, 0.8, 1e-15);
    for (double f : r.forgetting) EXPECT_EQ(f, 0.0);
}

TEST(Finalize, TwoTaskArithmetic) {
    const RunReport r = finalize(filled({{1.0}, {0.6, 1.0}}));
    EXPECT_NEAR(r.avg, 0.8, 1e-15);
    EXPECT_NEAR(r.forgetting[0], 0.4, 1e-15);
    EXPECT_EQ(r.forgetting[1], 0.0);
}

TEST(Finalize, NondecreasingColumnsForgetNothing) {
    const RunReport r = finalize(filled({{0.5}, {0.6, 0.2}, {0.9, 0.2, 0.7}}));
    for (double f : r.forgetting) EXPECT_EQ(f, 0.0);
}

TEST(Finalize, MatchesDirectDefinition) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t n = 1 + rng.below(8);
        std::vector<TaskId> ids(n);
        std::iota(ids.begin(), ids.end(), 0);
        const AccuracyMatrix a = random_matrix(rng, n, ids);
        const RunReport r = finalize(a);
        double avg = 0.0;
        for (std::size_t j = 0; j < n; ++j) avg += *a.at(n - 1, j);
        EXPECT_NEAR(r.avg, avg / static_cast<double>(n), 1e-15);
        for (std::size_t j = 0; j < n; ++j) {
            double best = -1.0;
            for (std::size_t i = j; i < n; ++i) best = std::max(best, *a.at(i, j));
            EXPECT_EQ(r.forgetting[j], best - *a.at(n - 1, j));
            EXPECT_GE(r.forgetting[j], 0.0);
        }
    }
}

TEST(Finalize, IncompleteMatrixRejected) {
    AccuracyMatrix a({0, 1}, MetricKind::accuracy);
    a.set(0, 0, 1.0);
    a.set(1, 1, 1.0);
    EXPECT_FALSE(a.complete());
    EXPECT_THROW(finalize(a), ContractViolation);
}

TEST(Matrix, TriangleAndRangeEnforced) {
    AccuracyMatrix a({4, 7}, MetricKind::accuracy);
    EXPECT_THROW(a.set(0, 1, 0.5), ContractViolation);
    EXPECT_THROW(a.set(2, 0, 0.5), ContractViolation);
    EXPECT_THROW(a.set(1, 0, 1.5), ContractViolation);
    EXPECT_FALSE(a.at(0, 1).has_value());
    a.set(1, 0, 0.25);
    EXPECT_EQ(a.at(1, 0), 0.25);
    EXPECT_FALSE(a.row_complete(1));
}

TEST(Finalize, AvgIsPermutationEquivariant) {
    // relabelling tasks permutes the final row but leaves AVG unchanged
    Rng rng(3);
    const AccuracyMatrix a = random_matrix(rng, 4, {0, 1, 2, 3});
    const AccuracyMatrix b = [&] {
        AccuracyMatrix m({10, 11, 12, 13}, MetricKind::accuracy);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.set(i, j, *a.at(i, j));
        return m;
    }();
    const RunReport ra = finalize(a), rb = finalize(b);
    EXPECT_EQ(ra.avg, rb.avg);
    EXPECT_EQ(ra.forgetting, rb.forgetting);
    AccuracyMatrix last({0, 1, 2}, MetricKind::accuracy), swapped({2, 0, 1}, MetricKind::accuracy);
    const double vals[3] = {0.9, 0.4, 0.7};
    const std::size_t perm[3] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            last.set(i, j, i == 2 ? vals[j] : 0.5);
            swapped.set(i, j, i == 2 ? vals[perm[j]] : 0.5);
        }
    EXPECT_NEAR(finalize(last).avg, finalize(swapped).avg, 1e-15);
}

TEST(MacroF1, PerfectPrediction) {
    const std::vector<std::size_t> y{0, 1, 2, 2, 1, 0};
    const MetricRecord m = score_predictions(y, y, 3);
    EXPECT_EQ(m.macro_f1, 1.0);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.correct, 6u);
}

TEST(MacroF1, ConstantPredictorOnBalancedBinary) {
    const std::vector<std::size_t> y{0, 1, 0, 1, 0, 1, 0, 1};
    const std::vector<std::size_t> p(8, 0);
    const MetricRecord m = score_predictions(y, p, 2);
    EXPECT_NEAR(m.macro_f1, 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(m.accuracy, 0.5, 1e-15);
}

TEST(MacroF1, MatchesPerClassDefinition) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t k = 2 + rng.below(3), n = 1 + rng.below(40);
        std::vector<std::size_t> y(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = rng.below(k);
            p[i] = rng.below(k);
        }
        double f1 = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            double tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                tp += y[i] == c && p[i] == c;
                fp += y[i] != c && p[i] == c;
                fn += y[i] == c && p[i] != c;
            }
            const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0, rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
            f1 += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        }
        EXPECT_NEAR(score_predictions(y, p, k).macro_f1, f1 / static_cast<double>(k), 1e-12);

        // merging split counts equals one pass
        ConfusionCounts a(k), b(k), all(k);
        for (std::size_t i = 0; i < n; ++i) {
            (i % 2 ? a : b).add(y[i], p[i]);
            all.add(y[i], p[i]);
        }
        a.merge(b);
        EXPECT_EQ(a.cells, all.cells);
    }
}

TEST(Report, RoundTripIsExact) {
    const auto dir = scratch_dir("report");
    Rng rng(8);
    RunReport r = finalize(random_matrix(rng, 3, {5, 2, 9}));
    r.pool_size_trajectory = {1, 1, 2};
    r.params = {256, 16, 54, 326};
    r.config = R"({"method":"mocl_p","prune":{"threshold":0.025}})";
    write_report(r, dir / "r.txt");
    EXPECT_EQ(read_report(dir / "r.txt"), r);
}

TEST(Report, MalformedInputsReportLines) {
    const auto dir = scratch_dir("report_bad");
    Rng rng(8);
    RunReport r = finalize(random_matrix(rng, 3, {0, 1, 2}));
    r.pool_size_trajectory = {1, 2, 3};
    write_report(r, dir / "r.txt");
    std::ifstream in(dir / "r.txt");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);

    auto write_lines = [&](const std::vector<std::string>& ls) {
        std::ofstream out(dir / "bad.txt");
        for (const auto& l : ls) out << l << '\n';
    };
    auto line_of = [&]() -> std::size_t {
        try {
            read_report(dir / "bad.txt");
        } catch (const ParseError& e) {
            return e.line();
        }
        return 0;
    };

    write_lines({lines.begin(), lines.end() - 2});  // truncated
    EXPECT_EQ(line_of(), lines.size() - 1);

    auto bad = lines;
    bad[2] = "frobnicate 1";
    write_lines(bad);
    EXPECT_EQ(line_of(), 3u);

    bad = lines;
    bad.push_back("avg 1");
    write_lines(bad);
    EXPECT_EQ(line_of(), lines.size() + 1);
}

TEST(MatrixCsv, RoundTripIsExact) {
    const auto dir = scratch_dir("csv");
    Rng rng(12);
    const AccuracyMatrix a = random_matrix(rng, 5, {3, 1, 4, 0, 2});
    write_matrix_csv(a, dir / "a.csv");
    EXPECT_EQ(read_matrix_csv(dir / "a.csv", MetricKind::accuracy), a);
    std::ifstream in(dir / "a.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "after_task,3,1,4,0,2");
}

TEST(Format, DoublesRoundTrip) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform(-1e6, 1e6) * std::pow(10.0, rng.uniform(-20, 20));
        EXPECT_EQ(std::stod(format_double(v)), v);
        EXPECT_EQ(std::stod(format_shortest(v)), v);
    }
    EXPECT_EQ(format_shortest(0.025), "0.025");
}
