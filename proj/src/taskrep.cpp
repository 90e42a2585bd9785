#include "mocl/taskrep.hpp"

#include <algorithm>
#include <cmath>

#include "mocl/error.hpp"
#include "mocl/rng.hpp"

namespace mocl {

std::string_view to_string(RepKind kind) {
    switch (kind) {
        case RepKind::trainable:
            return "trainable";
        case RepKind::gaussian:
            return "gaussian";
        case RepKind::embed_mean:
            return "embed_mean";
    }
    return "?";
}

RepKind parse_rep_kind(std::string_view tag) {
    if (tag == "trainable") return RepKind::trainable;
    if (tag == "gaussian") return RepKind::gaussian;
    if (tag == "embed_mean") return RepKind::embed_mean;
    throw ContractViolation("unknown rep_strategy '" + std::string(tag) +
                            "' (expected trainable, gaussian or embed_mean)");
}

std::uint64_t TaskRepresentation::hash() const {
    ContentHasher h;
    h.update(static_cast<std::uint64_t>(kind));
    h.update(vector.value);
    if (variance.size() > 0) h.update(variance);
    return h.digest();
}

TaskRepresentation init_feature_vector(const BackboneConfig& config, std::size_t dim, TaskId task_id,
                                       std::uint64_t seed) {
    MOCL_EXPECT(dim == config.d_model, "feature vector dimension " + std::to_string(dim) +
                                           " does not match d_model " + std::to_string(config.d_model));
    Rng rng(seed);
    TaskRepresentation rep;
    rep.kind = RepKind::trainable;
    rep.task_id = task_id;
    rep.vector.name = "task_vector_" + std::to_string(task_id);
    rep.vector.value = Tensor({dim}, 0.0);
    for (double& v : rep.vector.value.data()) v = rng.uniform(-0.05, 0.05);
    return rep;
}

namespace {

Tensor mean_of(const std::vector<Tensor>& inputs) {
    const Shape& shape = inputs.front().shape();
    MOCL_EXPECT(shape.size() == 1, "task inputs must be vectors");
    Tensor mu(shape, 0.0);
    for (const Tensor& x : inputs) {
        MOCL_EXPECT(x.shape() == shape, "task inputs have differing dimensions");
        for (std::size_t j = 0; j < mu.size(); ++j) mu[j] += x[j];
    }
    const double inv = 1.0 / static_cast<double>(inputs.size());
    for (double& v : mu.data()) v *= inv;
    return mu;
}

// a / sum(a); identity when the sum is not positive.
Var normalize_by_sum(Var a) {
    const Tensor& av = a.value();
    double total = 0.0;
    for (double v : av.data()) total += v;
    if (!(total > 0.0)) return a;
    Tensor out = av;
    for (double& v : out.data()) v /= total;
    return a.tape()->record(std::move(out), {a}, [ia = a.id(), total](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        const Tensor& av = tp.value(ia);
        double dot = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) dot += g[k] * av[k];
        Tensor& ga = tp.grad_acc(ia);
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] / total - dot / (total * total);
    });
}

}  // namespace

TaskRepresentation fit_gaussian(const std::vector<Tensor>& task_inputs, TaskId task_id) {
    MOCL_EXPECT(task_inputs.size() >= 2, "fit_gaussian needs at least 2 inputs");
    TaskRepresentation rep;
    rep.kind = RepKind::gaussian;
    rep.task_id = task_id;
    rep.vector.name = "gaussian_mean_" + std::to_string(task_id);
    rep.vector.value = mean_of(task_inputs);
    const Tensor& mu = rep.vector.value;
    rep.variance = Tensor(mu.shape(), 0.0);
    for (const Tensor& x : task_inputs)
        for (std::size_t j = 0; j < mu.size(); ++j) rep.variance[j] += (x[j] - mu[j]) * (x[j] - mu[j]);
    const double inv = 1.0 / static_cast<double>(task_inputs.size());
    for (double& v : rep.variance.data()) v = std::max(v * inv, kGaussianVarianceFloor);
    rep.vector.frozen = true;
    return rep;
}

TaskRepresentation embed_mean_rep(const std::vector<Tensor>& task_inputs, TaskId task_id) {
    MOCL_EXPECT(!task_inputs.empty(), "embed_mean_rep needs at least 1 input");
    TaskRepresentation rep;
    rep.kind = RepKind::embed_mean;
    rep.task_id = task_id;
    rep.vector.name = "embed_mean_" + std::to_string(task_id);
    rep.vector.value = mean_of(task_inputs);
    rep.vector.frozen = true;
    return rep;
}

Var match_weights(Tape& tape, const Tensor& x, const std::vector<MatchOperand>& reps, const MatchOptions& options) {
    MOCL_EXPECT(!reps.empty(), "match_weights needs at least one representation");
    for (const MatchOperand& r : reps) MOCL_EXPECT(r.rep != nullptr, "match_weights: null representation");
    if (std::all_of(x.data().begin(), x.data().end(), [](double v) { return v == 0.0; }))
        throw DomainError("match_weights: input embedding x is the zero vector");
    const RepKind kind = reps.front().rep->kind;
    for (const MatchOperand& r : reps) {
        MOCL_EXPECT(r.rep->kind == kind, "match_weights: representations of mixed variants");
    }

    if (kind == RepKind::gaussian) {
        Tensor logits({reps.size()}, 0.0);
        for (std::size_t k = 0; k < reps.size(); ++k) {
            const Tensor& mu = reps[k].rep->vector.value;
            const Tensor& var = reps[k].rep->variance;
            MOCL_EXPECT(mu.shape() == x.shape(), "match_weights: dimension mismatch");
            double s = 0.0;
            for (std::size_t d = 0; d < x.size(); ++d) s += (x[d] - mu[d]) * (x[d] - mu[d]) / var[d];
            logits[k] = -0.5 * s;
        }
        return softmax(tape.constant(std::move(logits)), 0);
    }

    Var xv = tape.constant(x);
    std::vector<Var> cosines;
    cosines.reserve(reps.size());
    for (const MatchOperand& r : reps) {
        Var v = r.vector.valid() ? r.vector : tape.borrow(r.rep->vector.value);
        MOCL_EXPECT(v.value().shape() == x.shape(), "match_weights: dimension mismatch");
        Var c = cosine(xv, v);
        cosines.push_back(options.allow_negative_weights ? c : relu(c));
    }
    Var alpha = stack(cosines);
    if (options.normalize) alpha = normalize_by_sum(alpha);
    return alpha;
}

Tensor match_weights(const Tensor& x, const std::vector<const TaskRepresentation*>& reps,
                     const MatchOptions& options) {
    Tape tape;
    std::vector<MatchOperand> ops;
    for (const TaskRepresentation* r : reps) ops.push_back({r, Var{}});
    return match_weights(tape, x, ops, options).value();
}

}  // namespace mocl
