#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mocl/autodiff.hpp"
#include "mocl/backbone.hpp"
#include "mocl/optim.hpp"

namespace mocl {

using TaskId = std::uint32_t;

enum class RepKind { trainable, gaussian, embed_mean };

std::string_view to_string(RepKind kind);
/// Throws ContractViolation on an unknown tag.
RepKind parse_rep_kind(std::string_view tag);

inline constexpr double kGaussianVarianceFloor = 1e-6;

/// A task's matching key: a vector for trainable/embed_mean, mean + diagonal variance for gaussian.
struct TaskRepresentation {
    RepKind kind = RepKind::trainable;
    TaskId task_id = 0;
    Parameter vector;  // v, or the gaussian mean
    Tensor variance;   // gaussian only

    bool frozen() const { return vector.frozen; }
    std::uint64_t hash() const;
    std::size_t param_count() const { return vector.value.size() + variance.size(); }
};

struct MatchOptions {
    /// Use raw cosines instead of clamping negatives to zero.
    bool allow_negative_weights = false;
    /// Divide cosine weights by their sum (skipped when the sum is not positive).
    bool normalize = false;
};

/// Uniform init in [-0.05, 0.05]; `dim` must equal the backbone width.
TaskRepresentation init_feature_vector(const BackboneConfig& config, std::size_t dim, TaskId task_id,
                                       std::uint64_t seed);

/// Diagonal gaussian over task inputs; population variance floored at 1e-6. Returned frozen.
TaskRepresentation fit_gaussian(const std::vector<Tensor>& task_inputs, TaskId task_id);

/// Mean of task inputs. Returned frozen.
TaskRepresentation embed_mean_rep(const std::vector<Tensor>& task_inputs, TaskId task_id);

/// One representation taking part in matching. If `vector` is unset the representation's
/// stored value is borrowed as a constant.
struct MatchOperand {
    const TaskRepresentation* rep = nullptr;
    Var vector;
};

/// Per-instance matching weights over `reps`, in order.
///
/// Cosine variants: alpha_k = max(0, cos(x, v_k)), differentiable w.r.t. any tracked v.
/// Gaussian: softmax_k of -1/2 * sum_d (x_d - mu_kd)^2 / var_kd.
Var match_weights(Tape& tape, const Tensor& x, const std::vector<MatchOperand>& reps,
                  const MatchOptions& options = {});

/// Value-level convenience wrapper.
Tensor match_weights(const Tensor& x, const std::vector<const TaskRepresentation*>& reps,
                     const MatchOptions& options = {});

}  // namespace mocl
