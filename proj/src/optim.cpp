#include "mocl/optim.hpp"

#include <cmath>

#include "mocl/error.hpp"

namespace mocl {

void AdamWHyper::validate() const {
    MOCL_EXPECT(lr > 0.0, "adamw: lr must be > 0");
    MOCL_EXPECT(beta1 > 0.0 && beta1 < 1.0, "adamw: beta1 must lie in (0, 1)");
    MOCL_EXPECT(beta2 > 0.0 && beta2 < 1.0, "adamw: beta2 must lie in (0, 1)");
    MOCL_EXPECT(eps > 0.0, "adamw: eps must be > 0");
    MOCL_EXPECT(weight_decay >= 0.0, "adamw: weight_decay must be >= 0");
}

AdamW::AdamW(AdamWHyper hyper) : hyper_(hyper) { hyper_.validate(); }

void AdamW::step(const std::vector<Parameter*>& params, const std::vector<const Tensor*>& grads) {
    MOCL_EXPECT(params.size() == grads.size(), "adamw: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const Parameter* p : params) {
            m_.emplace_back(p->value.shape(), 0.0);
            v_.emplace_back(p->value.shape(), 0.0);
        }
    }
    MOCL_EXPECT(m_.size() == params.size(), "adamw: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = *params[i];
        if (p.frozen) throw FrozenWriteError("adamw: parameter '" + p.name + "' is frozen");
        MOCL_EXPECT(p.value.shape() == grads[i]->shape() && p.value.shape() == m_[i].shape(),
                    "adamw: shape mismatch for parameter '" + p.name + "': " + shape_str(p.value.shape()) +
                        " vs gradient " + shape_str(grads[i]->shape()));
    }

    ++steps_;
    const auto& h = hyper_;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = params[i]->value;
        const Tensor& g = *grads[i];
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            w[j] -= h.lr * h.weight_decay * w[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

}  // namespace mocl
