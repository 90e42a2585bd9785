#pragma once

#include <functional>
#include <vector>

#include "mocl/autodiff.hpp"

namespace mocl {

/// Builds a scalar loss on `tape` from the given parameter leaves.
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients with central finite differences.
///
/// Relative error per coordinate is |analytic - fd| / max(1e-12, |analytic| + |fd|).
/// Throws NonDeterminismError if two evaluations at the base point differ.
GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensor>& params, double step = 1e-5);

}  // namespace mocl
