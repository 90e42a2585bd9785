#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mocl/autodiff.hpp"
#include "mocl/rng.hpp"
#include "mocl/tensor.hpp"

namespace testing_support {

inline mocl::Tensor random_tensor(mocl::Rng& rng, mocl::Shape shape, double lo = -1.0, double hi = 1.0) {
    mocl::Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// Tensor-valued function of some inputs, built on a tape.
using TensorFn = std::function<mocl::Var(mocl::Tape&, const std::vector<mocl::Var>&)>;

struct FdReport {
    double max_rel = 0.0;
    double max_abs = 0.0;
};

/// Independent central-difference check of d/d(inputs) sum(f(inputs) * R) for a fixed random R.
/// Central differences carry ~1e-11 absolute noise, so a relative error is only meaningful where
/// |analytic| + |fd| >= `floor`; every coordinate still enters the absolute error.
inline FdReport fd_compare(const TensorFn& f, const std::vector<mocl::Tensor>& inputs, std::uint64_t seed,
                           double step = 1e-5, double floor = 1e-5) {
    mocl::Rng rng(seed);
    mocl::Tensor weights;
    auto eval = [&](const std::vector<mocl::Tensor>& in) {
        mocl::Tape tape;
        std::vector<mocl::Var> vars;
        for (const auto& t : in) vars.push_back(tape.constant(t));
        const mocl::Tensor out = f(tape, vars).value();
        if (weights.size() == 0) weights = random_tensor(rng, out.shape());
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
        return s;
    };
    eval(inputs);

    mocl::Tape tape;
    std::vector<mocl::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    mocl::Var out = f(tape, leaves);
    mocl::Var loss = mocl::sum(mocl::mul(out, tape.constant(weights)));
    tape.backward(loss);

    FdReport rep;
    std::vector<mocl::Tensor> probe = inputs;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        const mocl::Tensor& g = tape.grad(leaves[p]);
        for (std::size_t i = 0; i < inputs[p].size(); ++i) {
            const double orig = probe[p][i];
            probe[p][i] = orig + step;
            const double up = eval(probe);
            probe[p][i] = orig - step;
            const double down = eval(probe);
            probe[p][i] = orig;
            const double fd = (up - down) / (2.0 * step);
            const double a = g[i];
            const double abs_err = std::abs(a - fd);
            rep.max_abs = std::max(rep.max_abs, abs_err);
            if (std::abs(a) + std::abs(fd) >= floor) rep.max_rel = std::max(rep.max_rel, abs_err / (std::abs(a) + std::abs(fd)));
        }
    }
    return rep;
}

/// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mocl_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing_support
