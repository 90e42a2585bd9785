#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mocl/autodiff.hpp"
#include "mocl/error.hpp"
#include "mocl/gradcheck.hpp"
#include "mocl/optim.hpp"
#include "mocl/rng.hpp"
#include "support.hpp"

using namespace mocl;
using testing_support::fd_compare;
using testing_support::random_tensor;

// ---------------------------------------------------------------------------
// Tensor and RNG

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), ContractViolation);
    EXPECT_THROW(Tensor(Shape{}, 0.0), ContractViolation);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_THROW(t.reshaped({4}), ContractViolation);
    EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tensor, HashCoversShapeAndValues) {
    Tensor a({2, 2}, 1.0);
    Tensor b({4}, 1.0);
    Tensor c({2, 2}, 1.0);
    c[3] = std::nextafter(1.0, 2.0);
    EXPECT_EQ(a.hash(), Tensor({2, 2}, 1.0).hash());
    EXPECT_NE(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(hash_hex(0x1234).size(), 16u);
}

TEST(Rng, DeterministicAndInRange) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform01();
        EXPECT_EQ(u, b.uniform01());
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
        const auto k = a.below(7);
        EXPECT_EQ(k, b.below(7));
        EXPECT_LT(k, 7u);
    }
}

TEST(Rng, DerivedStreamsDifferByTaskAndTag) {
    EXPECT_EQ(derive_seed(1, 2, "x"), derive_seed(1, 2, "x"));
    EXPECT_NE(derive_seed(1, 2, "x"), derive_seed(1, 3, "x"));
    EXPECT_NE(derive_seed(1, 2, "x"), derive_seed(1, 2, "y"));
    EXPECT_NE(derive_seed(1, 2, "x"), derive_seed(2, 2, "x"));
}

TEST(Rng, ShuffleIsAPermutation) {
    Rng rng(3);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

// ---------------------------------------------------------------------------
// Forward kernels

TEST(Kernels, SoftmaxOfZerosIsUniform) {
    Tape tape;
    const Tensor s = softmax(tape.constant(Tensor::vector({0, 0})), 0).value();
    EXPECT_EQ(s[0], 0.5);
    EXPECT_EQ(s[1], 0.5);
}

TEST(Kernels, CrossEntropyOfUniformLogitsIsLn2) {
    Tape tape;
    EXPECT_NEAR(cross_entropy(tape.constant(Tensor::vector({0, 0})), 0).value().item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(std::log(2.0), 0.693147, 1e-6);
}

TEST(Kernels, CosineAnalytic) {
    Tape tape;
    const double c = cosine(tape.constant(Tensor::vector({1, 1})), tape.constant(Tensor::vector({1, 0}))).value().item();
    EXPECT_NEAR(c, 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(c, 0.707107, 1e-6);
}

TEST(Kernels, CosineRejectsZeroOperandByName) {
    Tape tape;
    Var z = tape.constant(Tensor::vector({0, 0}));
    Var v = tape.constant(Tensor::vector({1, 0}));
    try {
        cosine(z, v);
        FAIL() << "expected DomainError";
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("first operand"), std::string::npos);
    }
    try {
        cosine(v, z);
        FAIL() << "expected DomainError";
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("second operand"), std::string::npos);
    }
}

TEST(Kernels, ShapeMismatchIsContractViolation) {
    Tape tape;
    Var a = tape.constant(Tensor({2, 3}, 1.0));
    Var b = tape.constant(Tensor({2, 2}, 1.0));
    EXPECT_THROW(add(a, b), ContractViolation);
    EXPECT_THROW(matmul(a, a), ContractViolation);
    EXPECT_THROW(softmax(a, 2), ContractViolation);
    EXPECT_THROW(cross_entropy(tape.constant(Tensor::vector({0, 0})), 2), ContractViolation);
}

TEST(Kernels, SoftmaxRowsAreDistributions) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(6);
        Tape tape;
        const Tensor x = random_tensor(rng, {r, c}, -30.0, 30.0);
        const Tensor s = softmax(tape.constant(x), 1).value();
        for (std::size_t i = 0; i < r; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                EXPECT_GE(s.at(i, j), 0.0);
                total += s.at(i, j);
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(Kernels, LayerNormStandardizesRows) {
    // With eps = 1e-5 the normalized variance is var/(var+eps); inputs with variance well above 10
    // keep that within 1e-6 of 1.
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const std::size_t r = 1 + rng.below(4), c = 2 + rng.below(6);
        Tensor x = random_tensor(rng, {r, c}, -20.0, 20.0);
        for (std::size_t i = 0; i < r; ++i) {  // guarantee spread
            x.at(i, 0) = -25.0;
            x.at(i, 1) = 25.0;
        }
        Tape tape;
        const Tensor y =
            layer_norm(tape.constant(x), tape.constant(Tensor({c}, 1.0)), tape.constant(Tensor({c}, 0.0))).value();
        for (std::size_t i = 0; i < r; ++i) {
            double m = 0.0, v = 0.0;
            for (std::size_t j = 0; j < c; ++j) m += y.at(i, j);
            m /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
            v /= static_cast<double>(c);
            EXPECT_LT(std::abs(m), 1e-9);
            EXPECT_NEAR(v, 1.0, 1e-6);
        }
    }
}

TEST(Kernels, DeterministicOutputs) {
    Rng rng(9);
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
    Tape t1, t2;
    EXPECT_EQ(softmax(matmul(t1.constant(a), t1.constant(b)), 1).value(),
              softmax(matmul(t2.constant(a), t2.constant(b)), 1).value());
}

// ---------------------------------------------------------------------------
// Backward

TEST(Backward, SumOfSquares) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({1, 2}));
    tape.backward(sum(mul(p, p)));
    EXPECT_EQ(tape.grad(p), Tensor::vector({2, 4}));
}

TEST(Backward, NonParticipatingParameterHasExactlyZeroGradient) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({1, 2}));
    Var q = tape.leaf(Tensor::vector({3, 4, 5}));
    tape.backward(sum(mul(p, p)));
    EXPECT_EQ(tape.grad(q), Tensor({3}, 0.0));
}

TEST(Backward, RepeatedBackwardWithoutResetIsRejected) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({1, 2}));
    Var loss = sum(p);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), ContractViolation);
    tape.reset();
    Var p2 = tape.leaf(Tensor::vector({1, 2}));
    EXPECT_NO_THROW(tape.backward(sum(p2)));
}

TEST(Backward, NonScalarLossIsRejected) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({1, 2}));
    EXPECT_THROW(tape.backward(p), ContractViolation);
}

TEST(Backward, CompositeMatchesFiniteDifferences2x2) {
    // CE(softmax-logits of W x) on a 2x2 case, step 1e-5, relative error 1e-6.
    const Tensor w = Tensor::matrix(2, 2, {0.3, -0.7, 1.1, 0.2});
    const Tensor x = Tensor::vector({0.5, -1.5});
    ScalarFn f = [](Tape&, const std::vector<Var>& p) { return cross_entropy(matvec(p[0], p[1]), 1); };
    EXPECT_LT(grad_check(f, {w, x}, 1e-5).max_rel_error, 1e-6);
}

namespace {

struct KernelCase {
    const char* name;
    std::function<std::vector<Tensor>(Rng&)> inputs;
    testing_support::TensorFn fn;
};

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Values bounded away from zero so relu and the clamp-free paths have no kink nearby.
Tensor away_from_zero(Rng& rng, Shape shape) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
    return t;
}

std::vector<KernelCase> kernel_cases() {
    std::vector<KernelCase> cases;
    cases.push_back({"add",
                     [](Rng& r) {
                         Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                         return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)};
                     },
                     [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }});
    cases.push_back({"sub",
                     [](Rng& r) {
                         Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                         return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)};
                     },
                     [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }});
    cases.push_back({"mul",
                     [](Rng& r) {
                         Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                         return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)};
                     },
                     [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }});
    cases.push_back({"scale", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 5)})}; },
                     [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); }});
    cases.push_back({"add_rowwise",
                     [](Rng& r) {
                         const std::size_t c = pick(r, 1, 4);
                         return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), c}), random_tensor(r, {c})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return add_rowwise(v[0], v[1]); }});
    cases.push_back({"matmul",
                     [](Rng& r) {
                         const std::size_t m = pick(r, 1, 3), k = pick(r, 1, 4), n = pick(r, 1, 3);
                         return std::vector<Tensor>{random_tensor(r, {m, k}), random_tensor(r, {k, n})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }});
    cases.push_back({"matvec",
                     [](Rng& r) {
                         const std::size_t m = pick(r, 1, 3), k = pick(r, 1, 4);
                         return std::vector<Tensor>{random_tensor(r, {m, k}), random_tensor(r, {k})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return matvec(v[0], v[1]); }});
    cases.push_back({"transpose",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), pick(r, 1, 4)})}; },
                     [](Tape&, const std::vector<Var>& v) { return transpose(v[0]); }});
    cases.push_back({"reshape", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, pick(r, 1, 3) * 2})}; },
                     [](Tape&, const std::vector<Var>& v) {
                         return reshape(v[0], {v[0].value().size() / 2, 2});
                     }});
    cases.push_back({"softmax_rows",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), pick(r, 1, 5)}, -3, 3)}; },
                     [](Tape&, const std::vector<Var>& v) { return softmax(v[0], 1); }});
    cases.push_back({"softmax_cols",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 4), pick(r, 1, 3)}, -3, 3)}; },
                     [](Tape&, const std::vector<Var>& v) { return softmax(v[0], 0); }});
    cases.push_back({"softmax_vector", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 6)}, -3, 3)}; },
                     [](Tape&, const std::vector<Var>& v) { return softmax(v[0], 0); }});
    cases.push_back({"layer_norm",
                     [](Rng& r) {
                         // Rows with near-equal entries make the third derivative blow up and the
                         // central difference (not the gradient) inaccurate; pin a spread per row.
                         const std::size_t c = pick(r, 2, 5);
                         Tensor x = random_tensor(r, {pick(r, 1, 3), c}, -2, 2);
                         for (std::size_t i = 0; i < x.rows(); ++i) {
                             x.at(i, 0) = -1.5;
                             x.at(i, 1) = 1.5;
                         }
                         return std::vector<Tensor>{x, random_tensor(r, {c}, 0.5, 1.5), random_tensor(r, {c})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); }});
    cases.push_back({"mean_axis0",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 4), pick(r, 1, 4)})}; },
                     [](Tape&, const std::vector<Var>& v) { return mean(v[0], 0); }});
    cases.push_back({"mean_axis1",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 4), pick(r, 1, 4)})}; },
                     [](Tape&, const std::vector<Var>& v) { return mean(v[0], 1); }});
    cases.push_back({"sum", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), pick(r, 1, 3)})}; },
                     [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }});
    cases.push_back({"relu", [](Rng& r) { return std::vector<Tensor>{away_from_zero(r, {pick(r, 1, 6)})}; },
                     [](Tape&, const std::vector<Var>& v) { return relu(v[0]); }});
    cases.push_back({"gelu", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 6)}, -3, 3)}; },
                     [](Tape&, const std::vector<Var>& v) { return gelu(v[0]); }});
    cases.push_back({"cross_entropy", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 2, 5)}, -3, 3)}; },
                     [](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], 1); }});
    cases.push_back({"cosine",
                     [](Rng& r) {
                         const std::size_t d = pick(r, 2, 6);
                         return std::vector<Tensor>{away_from_zero(r, {d}), away_from_zero(r, {d})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return cosine(v[0], v[1]); }});
    cases.push_back({"concat_rows",
                     [](Rng& r) {
                         const std::size_t c = pick(r, 1, 4);
                         return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), c}), random_tensor(r, {pick(r, 1, 3), c})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return concat_rows({v[0], v[1]}); }});
    cases.push_back({"concat_cols",
                     [](Rng& r) {
                         const std::size_t rows = pick(r, 1, 4);
                         return std::vector<Tensor>{random_tensor(r, {rows, pick(r, 1, 3)}),
                                                    random_tensor(r, {rows, pick(r, 1, 3)})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return concat_cols({v[0], v[1]}); }});
    cases.push_back({"slice_cols", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 1, 3), 5})}; },
                     [](Tape&, const std::vector<Var>& v) { return slice_cols(v[0], 1, 3); }});
    cases.push_back({"slice", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 2, 3})}; },
                     [](Tape&, const std::vector<Var>& v) { return slice(v[0], 6, {2, 3}); }});
    cases.push_back({"stack_element",
                     [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {pick(r, 2, 5)})}; },
                     [](Tape&, const std::vector<Var>& v) {
                         return stack({element(v[0], 1), element(v[0], 0), element(v[0], 1)});
                     }});
    cases.push_back({"weighted_sum",
                     [](Rng& r) {
                         Shape s{pick(r, 1, 2), 2, pick(r, 1, 3)};
                         return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s), random_tensor(r, s),
                                                    random_tensor(r, {3})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return weighted_sum({v[0], v[1], v[2]}, v[3]); }});
    cases.push_back({"attention",
                     [](Rng& r) {
                         const std::size_t n = pick(r, 1, 3), m = pick(r, 1, 4), d = pick(r, 1, 3), dv = pick(r, 1, 3);
                         return std::vector<Tensor>{random_tensor(r, {n, d}), random_tensor(r, {m, d}),
                                                    random_tensor(r, {m, dv})};
                     },
                     [](Tape&, const std::vector<Var>& v) { return scaled_dot_product_attention(v[0], v[1], v[2]); }});
    return cases;
}

}  // namespace

class KernelGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(KernelGradient, MatchesFiniteDifferencesOver100Seeds) {
    const KernelCase kc = kernel_cases()[GetParam()];
    double worst = 0.0, worst_abs = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(seed, GetParam(), "fd"));
        const auto inputs = kc.inputs(rng);
        const auto rep = fd_compare(kc.fn, inputs, seed + 1000);
        worst = std::max(worst, rep.max_rel);
        worst_abs = std::max(worst_abs, rep.max_abs);
    }
    EXPECT_LT(worst, 1e-5) << kc.name;
    EXPECT_LT(worst_abs, 1e-7) << kc.name;
}

INSTANTIATE_TEST_SUITE_P(AllKernels, KernelGradient, ::testing::Range<std::size_t>(0, kernel_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                             return std::string(kernel_cases()[info.param].name);
                         });

// ---------------------------------------------------------------------------
// grad_check

TEST(GradCheck, ExactQuadratic) {
    ScalarFn f = [](Tape&, const std::vector<Var>& p) { return sum(mul(p[0], p[0])); };
    EXPECT_LT(grad_check(f, {Tensor::vector({0.3, -1.2, 2.0})}).max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
    ScalarFn f = [](Tape& tape, const std::vector<Var>&) { return tape.constant(Tensor::scalar(3.0)); };
    EXPECT_EQ(grad_check(f, {Tensor::vector({1, 2})}).max_rel_error, 0.0);
}

TEST(GradCheck, DetectsNonDeterminism) {
    int calls = 0;
    ScalarFn f = [&calls](Tape& tape, const std::vector<Var>& p) {
        ++calls;
        return add(sum(p[0]), tape.constant(Tensor::scalar(static_cast<double>(calls))));
    };
    EXPECT_THROW(grad_check(f, {Tensor::vector({1, 2})}), NonDeterminismError);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, ZeroGradientAppliesDecoupledDecay) {
    AdamWHyper h;
    h.lr = 0.1;
    h.weight_decay = 0.1;
    AdamW opt(h);
    Parameter p{"p", Tensor::vector({1.0, -2.0, 0.5}), false};
    const Tensor before = p.value;
    const Tensor g({3}, 0.0);
    opt.step({&p}, {&g});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p.value[i], before[i] * (1.0 - 0.01));
}

TEST(AdamW, FirstStepMovesByLrTimesSign) {
    AdamWHyper h;
    h.lr = 0.05;
    h.weight_decay = 0.0;
    AdamW opt(h);
    Parameter p{"p", Tensor::vector({1.0, 1.0, 1.0}), false};
    const Tensor g = Tensor::vector({3.0, -0.2, 1e-3});
    opt.step({&p}, {&g});
    for (std::size_t i = 0; i < 3; ++i) {
        const double expected = 1.0 - h.lr * (g[i] > 0 ? 1.0 : -1.0);
        EXPECT_NEAR(p.value[i], expected, h.lr * 1e-4);
    }
}

TEST(AdamW, QuadraticLossStrictlyDecreases) {
    AdamWHyper h;
    h.lr = 0.05;
    h.weight_decay = 0.0;
    AdamW opt(h);
    Parameter p{"p", Tensor::vector({1.0}), false};
    double prev = p.value[0] * p.value[0];
    for (int i = 0; i < 10; ++i) {
        const Tensor g = Tensor::vector({2.0 * p.value[0]});
        opt.step({&p}, {&g});
        const double loss = p.value[0] * p.value[0];
        EXPECT_LT(loss, prev);
        prev = loss;
    }
}

TEST(AdamW, StateTracksParameters) {
    AdamW opt(AdamWHyper{});
    Parameter a{"a", Tensor({2, 3}, 1.0), false};
    Parameter b{"b", Tensor({4}, 1.0), false};
    const Tensor ga({2, 3}, 0.5), gb({4}, -0.5);
    for (std::uint64_t i = 1; i <= 3; ++i) {
        opt.step({&a, &b}, {&ga, &gb});
        EXPECT_EQ(opt.step_count(), i);
    }
    ASSERT_EQ(opt.first_moments().size(), 2u);
    EXPECT_EQ(opt.first_moments()[0].shape(), a.value.shape());
    EXPECT_EQ(opt.second_moments()[1].shape(), b.value.shape());
}

TEST(AdamW, RejectsFrozenAndMismatchedParameters) {
    AdamW opt(AdamWHyper{});
    Parameter frozen{"f", Tensor({2}, 1.0), true};
    const Tensor g({2}, 1.0), bad({3}, 1.0);
    EXPECT_THROW(opt.step({&frozen}, {&g}), FrozenWriteError);
    EXPECT_EQ(frozen.value, Tensor({2}, 1.0));
    Parameter p{"p", Tensor({2}, 1.0), false};
    AdamW opt2(AdamWHyper{});
    EXPECT_THROW(opt2.step({&p}, {&bad}), ContractViolation);
}

TEST(AdamW, HyperparameterRanges) {
    AdamWHyper h;
    h.beta1 = 1.0;
    EXPECT_THROW(AdamW{h}, ContractViolation);
    h = AdamWHyper{};
    h.lr = 0.0;
    EXPECT_THROW(AdamW{h}, ContractViolation);
    h = AdamWHyper{};
    h.eps = 0.0;
    EXPECT_THROW(AdamW{h}, ContractViolation);
    h = AdamWHyper{};
    h.weight_decay = -1.0;
    EXPECT_THROW(AdamW{h}, ContractViolation);
}
