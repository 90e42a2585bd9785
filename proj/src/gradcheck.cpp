#include "mocl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mocl/error.hpp"

namespace mocl {

namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor>& params) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.constant(p));
    return fn(tape, leaves).value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensor>& params, double step) {
    MOCL_EXPECT(step > 0.0, "grad_check: step must be positive");

    const double f0 = evaluate(fn, params);
    const double f1 = evaluate(fn, params);
    if (f0 != f1) throw NonDeterminismError("grad_check: function returned different values for identical inputs");

    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p, true));
    Var loss = fn(tape, leaves);
    MOCL_EXPECT(loss.value().size() == 1, "grad_check: function must be scalar-valued");
    tape.backward(loss);

    GradCheckResult result;
    std::vector<Tensor> work = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& analytic = tape.grad(leaves[pi]);
        for (std::size_t i = 0; i < params[pi].size(); ++i) {
            const double orig = work[pi][i];
            work[pi][i] = orig + step;
            const double fp = evaluate(fn, work);
            work[pi][i] = orig - step;
            const double fm = evaluate(fn, work);
            work[pi][i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = analytic[i];
            const double err = std::abs(a - fd) / std::max(1e-12, std::abs(a) + std::abs(fd));
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = pi;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace mocl
