#include <gtest/gtest.h>

#include <cmath>

#include "mocl/error.hpp"
#include "mocl/taskrep.hpp"
#include "support.hpp"

using namespace mocl;
using testing_support::fd_compare;
using testing_support::random_tensor;

namespace {

TaskRepresentation vec_rep(std::initializer_list<double> v, RepKind kind = RepKind::trainable, TaskId id = 0) {
    TaskRepresentation r;
    r.kind = kind;
    r.task_id = id;
    r.vector.value = Tensor::vector(v);
    return r;
}

TaskRepresentation vec_rep(const Tensor& v, TaskId id = 0) {
    TaskRepresentation r;
    r.task_id = id;
    r.vector.value = v;
    return r;
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(FeatureVector, InitBoundsAndDeterminism) {
    BackboneConfig c;
    const TaskRepresentation r = init_feature_vector(c, c.d_model, 2, 9);
    EXPECT_EQ(r.vector.value.shape(), (Shape{c.d_model}));
    EXPECT_FALSE(r.frozen());
    for (double v : r.vector.value.data()) {
        EXPECT_GE(v, -0.05);
        EXPECT_LE(v, 0.05);
    }
    EXPECT_EQ(init_feature_vector(c, c.d_model, 2, 9).hash(), r.hash());
    EXPECT_THROW(init_feature_vector(c, c.d_model + 1, 2, 9), ContractViolation);
}

TEST(Match, CosineExamples) {
    const TaskRepresentation v = vec_rep({0.3, -1.2, 2.0});
    EXPECT_NEAR(match_weights(Tensor::vector({0.3, -1.2, 2.0}), {&v})[0], 1.0, 1e-15);

    const TaskRepresentation up = vec_rep({0.0, 1.0}), left = vec_rep({-1.0, 0.0});
    const Tensor x = Tensor::vector({1.0, 0.0});
    EXPECT_EQ(match_weights(x, {&up})[0], 0.0);
    EXPECT_EQ(match_weights(x, {&left})[0], 0.0);
    EXPECT_NEAR(match_weights(x, {&left}, {.allow_negative_weights = true})[0], -1.0, 1e-15);
}

TEST(Match, NormalizeOption) {
    const TaskRepresentation a = vec_rep({1.0, 0.0}), b = vec_rep({1.0, 1.0});
    const Tensor w = match_weights(Tensor::vector({1.0, 0.0}), {&a, &b}, {.normalize = true});
    const double c = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(w[0], 1.0 / (1.0 + c), 1e-15);
    EXPECT_NEAR(w[1], c / (1.0 + c), 1e-15);
}

TEST(Match, Errors) {
    const TaskRepresentation a = vec_rep({1.0, 0.0});
    const TaskRepresentation g = vec_rep({1.0, 0.0}, RepKind::embed_mean);
    EXPECT_THROW(match_weights(Tensor::vector({0.0, 0.0}), {&a}), DomainError);
    EXPECT_THROW(match_weights(Tensor::vector({1.0, 0.0}), {&a, &g}), ContractViolation);
    EXPECT_THROW(match_weights(Tensor::vector({1.0, 0.0}), {}), ContractViolation);
    EXPECT_THROW(match_weights(Tensor::vector({1.0, 0.0, 0.0}), {&a}), ContractViolation);
}

TEST(Match, ScaleInvarianceAndRange) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        std::vector<TaskRepresentation> reps;
        for (int k = 0; k < 4; ++k) reps.push_back(vec_rep(random_tensor(rng, {6})));
        std::vector<const TaskRepresentation*> ptrs;
        for (const auto& r : reps) ptrs.push_back(&r);
        Tensor x = random_tensor(rng, {6});
        const double c = rng.uniform(0.01, 100.0);
        Tensor cx = x;
        for (double& v : cx.data()) v *= c;
        const Tensor w = match_weights(x, ptrs), wc = match_weights(cx, ptrs);
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_NEAR(w[k], wc[k], 1e-12);
            EXPECT_GE(w[k], 0.0);
            EXPECT_LE(w[k], 1.0);
            // independent cosine
            const double cos = dot(x, reps[k].vector.value) /
                               std::sqrt(dot(x, x) * dot(reps[k].vector.value, reps[k].vector.value));
            EXPECT_NEAR(w[k], std::max(0.0, cos), 1e-12);
        }
    }
}

TEST(Gaussian, FitExamples) {
    const TaskRepresentation a = fit_gaussian({Tensor::vector({1, 0}), Tensor::vector({0, 1})}, 0);
    EXPECT_EQ(a.vector.value, Tensor::vector({0.5, 0.5}));
    EXPECT_EQ(a.variance, Tensor::vector({0.25, 0.25}));
    EXPECT_TRUE(a.frozen());
    EXPECT_EQ(a.kind, RepKind::gaussian);

    const TaskRepresentation same = fit_gaussian({Tensor::vector({3, 4}), Tensor::vector({3, 4})}, 0);
    EXPECT_EQ(same.variance, Tensor::vector({kGaussianVarianceFloor, kGaussianVarianceFloor}));

    const TaskRepresentation b = fit_gaussian({Tensor::vector({0, 0}), Tensor::vector({2, 0})}, 0);
    EXPECT_EQ(b.vector.value, Tensor::vector({1, 0}));
    EXPECT_EQ(b.variance, Tensor::vector({1, 1e-6}));
    EXPECT_EQ(b.param_count(), 4u);

    EXPECT_THROW(fit_gaussian({Tensor::vector({1, 0})}, 0), ContractViolation);
}

TEST(Gaussian, WeightsAreSoftmaxOfMahalanobis) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        std::vector<TaskRepresentation> reps;
        for (TaskId k = 0; k < 3; ++k) {
            std::vector<Tensor> inputs;
            for (int i = 0; i < 5; ++i) inputs.push_back(random_tensor(rng, {4}));
            reps.push_back(fit_gaussian(inputs, k));
        }
        const Tensor x = random_tensor(rng, {4});
        const Tensor w = match_weights(x, {&reps[0], &reps[1], &reps[2]});
        double logits[3], mx = -INFINITY, z = 0.0, total = 0.0;
        for (int k = 0; k < 3; ++k) {
            double m = 0.0;
            for (int d = 0; d < 4; ++d) {
                const double diff = x[d] - reps[k].vector.value[d];
                m += diff * diff / reps[k].variance[d];
            }
            logits[k] = -0.5 * m;
            mx = std::max(mx, logits[k]);
        }
        for (double l : logits) z += std::exp(l - mx);
        for (int k = 0; k < 3; ++k) {
            EXPECT_NEAR(w[k], std::exp(logits[k] - mx) / z, 1e-12);
            total += w[k];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Gaussian, EquidistantTasksGetEqualWeight) {
    // same variance, means mirrored about x
    const TaskRepresentation a = fit_gaussian({Tensor::vector({1, 2}), Tensor::vector({3, 0})}, 0);
    const TaskRepresentation b = fit_gaussian({Tensor::vector({-1, 2}), Tensor::vector({-3, 0})}, 1);
    const Tensor w = match_weights(Tensor::vector({0.0, 1.0}), {&a, &b});
    EXPECT_NEAR(w[0], w[1], 1e-12);
    EXPECT_NEAR(w[0], 0.5, 1e-12);
}

TEST(EmbedMean, Examples) {
    const TaskRepresentation r = embed_mean_rep({Tensor::vector({1, 0}), Tensor::vector({0, 1})}, 0);
    EXPECT_EQ(r.vector.value, Tensor::vector({0.5, 0.5}));
    EXPECT_TRUE(r.frozen());
    EXPECT_EQ(r.kind, RepKind::embed_mean);
    const Tensor e = Tensor::vector({0.1, -7, 3});
    EXPECT_EQ(embed_mean_rep({e}, 0).vector.value, e);
    EXPECT_THROW(embed_mean_rep({}, 0), ContractViolation);

    Rng rng(4);
    std::vector<Tensor> xs;
    for (int i = 0; i < 7; ++i) xs.push_back(random_tensor(rng, {5}));
    const Tensor m1 = embed_mean_rep(xs, 0).vector.value;
    rng.shuffle(xs);
    const Tensor m2 = embed_mean_rep(xs, 0).vector.value;
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(m1[j], m2[j], 1e-15);
}

TEST(Match, GradientWrtTrainableVectorMatchesFiniteDifferences) {
    // Positive branch only: x and v are drawn from the same orthant so cos stays away from 0.
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const Tensor x = random_tensor(rng, {8}, 0.1, 1.0);
        const Tensor v = random_tensor(rng, {8}, 0.1, 1.0);
        const Tensor other = random_tensor(rng, {8}, 0.1, 1.0);
        const TaskRepresentation frozen_other = vec_rep(other, 0);
        TaskRepresentation current = vec_rep(v, 1);
        const auto f = [&](Tape& tape, const std::vector<Var>& in) {
            return match_weights(tape, x, {MatchOperand{&frozen_other, {}}, MatchOperand{&current, in[0]}});
        };
        const auto rep = fd_compare(f, {v}, seed);
        EXPECT_LT(rep.max_rel, 1e-5) << "seed " << seed;

        // the auxiliary objective term on its own
        const auto aux = [&](Tape& tape, const std::vector<Var>& in) { return cosine(tape.constant(x), in[0]); };
        EXPECT_LT(fd_compare(aux, {v}, seed).max_rel, 1e-5) << "seed " << seed;
    }
}

TEST(Match, ClampedBranchPassesNoGradient) {
    Tape tape;
    const TaskRepresentation r = vec_rep({-1.0, 0.2});
    const Var v = tape.leaf(r.vector.value);
    tape.backward(sum(match_weights(tape, Tensor::vector({1.0, 0.0}), {MatchOperand{&r, v}})));
    EXPECT_EQ(tape.grad(v), Tensor::vector({0.0, 0.0}));
}

TEST(RepKind, ParseRoundTrip) {
    for (RepKind k : {RepKind::trainable, RepKind::gaussian, RepKind::embed_mean})
        EXPECT_EQ(parse_rep_kind(to_string(k)), k);
    EXPECT_THROW(parse_rep_kind("gauss"), ContractViolation);
}
