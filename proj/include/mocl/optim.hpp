#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mocl/tensor.hpp"

namespace mocl {

/// A named trainable tensor that can be frozen. Frozen parameters reject optimizer writes.
struct Parameter {
    std::string name;
    Tensor value;
    bool frozen = false;

    std::uint64_t hash() const { return value.hash(); }
};

struct AdamWHyper {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const;
};

/// AdamW with decoupled weight decay and bias correction.
///
/// State is positional: the i-th parameter passed to step() owns the i-th moment pair,
/// so callers must pass the same parameter list in the same order every step.
class AdamW {
 public:
    explicit AdamW(AdamWHyper hyper);

    void step(const std::vector<Parameter*>& params, const std::vector<const Tensor*>& grads);

    std::uint64_t step_count() const noexcept { return steps_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }
    const AdamWHyper& hyper() const noexcept { return hyper_; }

 private:
    AdamWHyper hyper_;
    std::uint64_t steps_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

}  // namespace mocl
