#include "mocl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mocl/error.hpp"

namespace mocl {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kCosineEps = 1e-12;

Tape& same_tape(std::initializer_list<Var> vars) {
    Tape* tape = nullptr;
    for (const Var& v : vars) {
        MOCL_EXPECT(v.valid(), "operand is not attached to a tape");
        if (tape == nullptr) tape = v.tape();
        MOCL_EXPECT(v.tape() == tape, "operands recorded on different tapes");
    }
    return *tape;
}

Tape& same_tape(const std::vector<Var>& vars) {
    MOCL_EXPECT(!vars.empty(), "operation needs at least one operand");
    Tape* tape = vars.front().tape();
    for (const Var& v : vars) {
        MOCL_EXPECT(v.valid(), "operand is not attached to a tape");
        MOCL_EXPECT(v.tape() == tape, "operands recorded on different tapes");
    }
    return *tape;
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    MOCL_EXPECT(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                            " vs " + shape_str(b.shape()));
}

void expect_rank(const Tensor& a, std::size_t rank, const char* op) {
    MOCL_EXPECT(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                      shape_str(a.shape()));
}

// out[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
            out[i * n + j] += s;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* orow = out + p * n;
            const double* brow = b + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

double norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
    MOCL_EXPECT(valid(), "Var is not attached to a tape");
    return tape_->value(id_);
}

bool Var::requires_grad() const { return valid() && tape_->tracks(id_); }

Var Tape::push(Node node) {
    MOCL_EXPECT(!backward_done_, "tape already differentiated; reset() before recording");
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::borrow(const Tensor& value) {
    Node n;
    n.borrowed = &value;
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) rg = rg || tracks(v.id());
    Node n;
    n.owned = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    return push(std::move(n));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) rg = rg || tracks(v.id());
    Node n;
    n.owned = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
}

Tensor& Tape::grad_acc(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != value(id).size() || n.grad.shape() != value(id).shape())
        n.grad = Tensor(value(id).shape(), 0.0);
    return n.grad;
}

void Tape::backward(Var loss) {
    MOCL_EXPECT(loss.tape() == this, "loss was recorded on a different tape");
    MOCL_EXPECT(!backward_done_, "backward() already ran on this tape; reset() before reuse");
    MOCL_EXPECT(loss.value().size() == 1,
                "backward() needs a scalar loss, got shape " + shape_str(loss.value().shape()));
    backward_done_ = true;
    if (!tracks(loss.id())) return;
    grad_acc(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
        n.backward(*this, i);
    }
}

const Tensor& Tape::grad(Var v) const {
    MOCL_EXPECT(v.tape() == this, "variable was recorded on a different tape");
    const Node& n = nodes_[v.id()];
    if (n.requires_grad && n.grad.size() == value(v.id()).size() && n.grad.size() > 0) return n.grad;
    zero_grads_.emplace_back(value(v.id()).shape(), 0.0);
    return zero_grads_.back();
}

void Tape::reset() {
    nodes_.clear();
    zero_grads_.clear();
    backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
    Tape& t = same_tape({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    expect_same_shape(av, bv, "add");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        for (std::size_t id : {ia, ib}) {
            if (!tp.tracks(id)) continue;
            Tensor& ga = tp.grad_acc(id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    Tape& t = same_tape({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    expect_same_shape(av, bv, "sub");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        if (tp.tracks(ia)) {
            Tensor& ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.tracks(ib)) {
            Tensor& gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& t = same_tape({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    expect_same_shape(av, bv, "mul");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        if (tp.tracks(ia)) {
            const Tensor& bv = tp.value(ib);
            Tensor& ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tp.tracks(ib)) {
            const Tensor& av = tp.value(ia);
            Tensor& gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double c) {
    Tape& t = same_tape({a});
    Tensor out = a.value();
    for (double& v : out.data()) v *= c;
    const std::size_t ia = a.id();
    return t.record(std::move(out), {a}, [ia, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        Tensor& ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

Var add_rowwise(Var x, Var bias) {
    Tape& t = same_tape({x, bias});
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    expect_rank(xv, 2, "add_rowwise");
    expect_rank(bv, 1, "add_rowwise");
    MOCL_EXPECT(xv.cols() == bv.size(), "add_rowwise: bias length " + std::to_string(bv.size()) +
                                            " does not match columns " + std::to_string(xv.cols()));
    Tensor out = xv;
    const std::size_t r = xv.rows(), c = xv.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bv[j];
    const std::size_t ix = x.id(), ib = bias.id();
    return t.record(std::move(out), {x, bias}, [ix, ib, r, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        if (tp.tracks(ix)) {
            Tensor& gx = tp.grad_acc(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.tracks(ib)) {
            Tensor& gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
    });
}

Var relu(Var x) {
    Tape& t = same_tape({x});
    Tensor out = x.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    const std::size_t ix = x.id();
    return t.record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        const Tensor& xv = tp.value(ix);
        Tensor& gx = tp.grad_acc(ix);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

Var gelu(Var x) {
    static const double k = std::sqrt(2.0 / std::numbers::pi);
    Tape& t = same_tape({x});
    Tensor out = x.value();
    for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
    const std::size_t ix = x.id();
    return t.record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        const Tensor& xv = tp.value(ix);
        Tensor& gx = tp.grad_acc(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double th = std::tanh(k * (v + 0.044715 * v * v * v));
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * v * v);
            gx[i] += g[i] * d;
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
    Tape& t = same_tape({a, b});
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    expect_rank(av, 2, "matmul");
    expect_rank(bv, 2, "matmul");
    MOCL_EXPECT(av.cols() == bv.rows(),
                "matmul: inner extents differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n}, 0.0);
    gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return t.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        if (tp.tracks(ia)) {
            Tensor& ga = tp.grad_acc(ia);
            gemm_nt_acc(g.data().data(), tp.value(ib).data().data(), ga.data().data(), m, n, k);
        }
        if (tp.tracks(ib)) {
            Tensor& gb = tp.grad_acc(ib);
            gemm_tn_acc(tp.value(ia).data().data(), g.data().data(), gb.data().data(), m, k, n);
        }
    });
}

Var matvec(Var w, Var h) {
    const Tensor& hv = h.value();
    expect_rank(hv, 1, "matvec");
    Var col = reshape(h, {hv.size(), 1});
    Var out = matmul(w, col);
    return reshape(out, {out.value().rows()});
}

Var transpose(Var a) {
    Tape& t = same_tape({a});
    const Tensor& av = a.value();
    expect_rank(av, 2, "transpose");
    const std::size_t r = av.rows(), c = av.cols();
    Tensor out({c, r}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
    const std::size_t ia = a.id();
    return t.record(std::move(out), {a}, [ia, r, c](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        Tensor& ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

Var reshape(Var a, Shape shape) {
    Tape& t = same_tape({a});
    Tensor out = a.value().reshaped(std::move(shape));
    const std::size_t ia = a.id();
    return t.record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        Tensor& ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Normalizations and reductions

Var softmax(Var x, std::size_t axis) {
    Tape& t = same_tape({x});
    const Tensor& xv = x.value();
    MOCL_EXPECT(xv.rank() == 1 || xv.rank() == 2, "softmax: rank must be 1 or 2, got " + shape_str(xv.shape()));
    MOCL_EXPECT(axis < xv.rank(), "softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                      shape_str(xv.shape()));
    // View as `groups` independent vectors of length `len` with element stride `stride`.
    std::size_t groups, len, stride, group_step;
    if (xv.rank() == 1) {
        groups = 1, len = xv.size(), stride = 1, group_step = 0;
    } else if (axis == 1) {
        groups = xv.rows(), len = xv.cols(), stride = 1, group_step = xv.cols();
    } else {
        groups = xv.cols(), len = xv.rows(), stride = xv.cols(), group_step = 1;
    }
    Tensor out(xv.shape(), 0.0);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = gi * group_step;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * stride]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            const double e = std::exp(xv[base + j * stride] - mx);
            out[base + j * stride] = e;
            z += e;
        }
        for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= z;
    }
    return t.record(std::move(out), {x},
                    [ix = x.id(), groups, len, stride, group_step](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad_acc(self);
                        const Tensor& y = tp.value(self);
                        Tensor& gx = tp.grad_acc(ix);
                        for (std::size_t gi = 0; gi < groups; ++gi) {
                            const std::size_t base = gi * group_step;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < len; ++j)
                                dot += g[base + j * stride] * y[base + j * stride];
                            for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t p = base + j * stride;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    });
}

double layer_norm_epsilon() { return kLayerNormEps; }

Var layer_norm(Var x, Var gain, Var bias) {
    Tape& t = same_tape({x, gain, bias});
    const Tensor& xv = x.value();
    expect_rank(xv, 2, "layer_norm");
    const std::size_t r = xv.rows(), c = xv.cols();
    MOCL_EXPECT(gain.value().shape() == Shape{c} && bias.value().shape() == Shape{c},
                "layer_norm: gain/bias must have shape [" + std::to_string(c) + "]");
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor out({r, c}, 0.0);
    Tensor xhat({r, c}, 0.0);
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv.at(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = xv.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat.at(i, j) = (xv.at(i, j) - mu) * inv_std[i];
            out.at(i, j) = xhat.at(i, j) * gv[j] + bv[j];
        }
    }
    return t.record(std::move(out), {x, gain, bias},
                    [ix = x.id(), ig = gain.id(), ib = bias.id(), r, c, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad_acc(self);
                        const Tensor& gv = tp.value(ig);
                        if (tp.tracks(ig)) {
                            Tensor& gg = tp.grad_acc(ig);
                            for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat.at(i, j);
                        }
                        if (tp.tracks(ib)) {
                            Tensor& gb = tp.grad_acc(ib);
                            for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                        }
                        if (tp.tracks(ix)) {
                            Tensor& gx = tp.grad_acc(ix);
                            const double n = static_cast<double>(c);
                            for (std::size_t i = 0; i < r; ++i) {
                                double m1 = 0.0, m2 = 0.0;
                                for (std::size_t j = 0; j < c; ++j) {
                                    const double dxh = g[i * c + j] * gv[j];
                                    m1 += dxh;
                                    m2 += dxh * xhat.at(i, j);
                                }
                                m1 /= n;
                                m2 /= n;
                                for (std::size_t j = 0; j < c; ++j) {
                                    const double dxh = g[i * c + j] * gv[j];
                                    gx[i * c + j] += inv_std[i] * (dxh - m1 - xhat.at(i, j) * m2);
                                }
                            }
                        }
                    });
}

Var mean(Var x, std::size_t axis) {
    Tape& t = same_tape({x});
    const Tensor& xv = x.value();
    expect_rank(xv, 2, "mean");
    MOCL_EXPECT(axis < 2, "mean: axis must be 0 or 1");
    const std::size_t r = xv.rows(), c = xv.cols();
    MOCL_EXPECT((axis == 0 ? r : c) > 0, "mean: reduced axis is empty");
    Tensor out({axis == 0 ? c : r}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += xv.at(i, j);
    const double inv = 1.0 / static_cast<double>(axis == 0 ? r : c);
    for (double& v : out.data()) v *= inv;
    return t.record(std::move(out), {x}, [ix = x.id(), r, c, axis, inv](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        Tensor& gx = tp.grad_acc(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[axis == 0 ? j : i] * inv;
    });
}

Var sum(Var x) {
    Tape& t = same_tape({x});
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return t.record(Tensor::scalar(s), {x}, [ix = x.id()](Tape& tp, std::size_t self) {
        const double g = tp.grad_acc(self)[0];
        for (double& v : tp.grad_acc(ix).data()) v += g;
    });
}

// ---------------------------------------------------------------------------
// Losses and similarity

Var cross_entropy(Var logits, std::size_t label) {
    Tape& t = same_tape({logits});
    const Tensor& z = logits.value();
    expect_rank(z, 1, "cross_entropy");
    MOCL_EXPECT(label < z.size(), "cross_entropy: label " + std::to_string(label) + " out of range for " +
                                      std::to_string(z.size()) + " classes");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.data()) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z.data()) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    return t.record(Tensor::scalar(lse - z[label]), {logits},
                    [iz = logits.id(), label, lse](Tape& tp, std::size_t self) {
                        const double g = tp.grad_acc(self)[0];
                        const Tensor& zv = tp.value(iz);
                        Tensor& gz = tp.grad_acc(iz);
                        for (std::size_t i = 0; i < zv.size(); ++i) {
                            const double p = std::exp(zv[i] - lse);
                            gz[i] += g * (p - (i == label ? 1.0 : 0.0));
                        }
                    });
}

double cosine_value(const Tensor& a, const Tensor& b) {
    MOCL_EXPECT(a.rank() == 1 && a.shape() == b.shape(),
                "cosine: operands must be vectors of equal length, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    const double na = norm(a), nb = norm(b);
    if (na == 0.0) throw DomainError("cosine: first operand is the zero vector");
    if (nb == 0.0) throw DomainError("cosine: second operand is the zero vector");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot / (std::max(na, kCosineEps) * std::max(nb, kCosineEps));
}

Var cosine(Var a, Var b) {
    Tape& t = same_tape({a, b});
    const double c = cosine_value(a.value(), b.value());
    const double na = std::max(norm(a.value()), kCosineEps);
    const double nb = std::max(norm(b.value()), kCosineEps);
    return t.record(Tensor::scalar(c), {a, b}, [ia = a.id(), ib = b.id(), c, na, nb](Tape& tp, std::size_t self) {
        const double g = tp.grad_acc(self)[0];
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        if (tp.tracks(ia)) {
            Tensor& ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (bv[i] / (na * nb) - c * av[i] / (na * na));
        }
        if (tp.tracks(ib)) {
            Tensor& gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
        }
    });
}

// ---------------------------------------------------------------------------
// Structural

Var concat_rows(const std::vector<Var>& parts) {
    Tape& t = same_tape(parts);
    const std::size_t c = parts.front().value().rank() == 2 ? parts.front().value().cols() : 0;
    std::size_t rows = 0;
    for (const Var& p : parts) {
        expect_rank(p.value(), 2, "concat_rows");
        MOCL_EXPECT(p.value().cols() == c, "concat_rows: column counts differ");
        rows += p.value().rows();
    }
    std::vector<double> data;
    data.reserve(rows * c);
    std::vector<std::size_t> ids, offsets;
    for (const Var& p : parts) {
        offsets.push_back(data.size());
        ids.push_back(p.id());
        data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    }
    return t.record(Tensor({rows, c}, std::move(data)), parts,
                    [ids = std::move(ids), offsets = std::move(offsets)](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad_acc(self);
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (!tp.tracks(ids[k])) continue;
                            Tensor& gp = tp.grad_acc(ids[k]);
                            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
                        }
                    });
}

Var concat_cols(const std::vector<Var>& parts) {
    Tape& t = same_tape(parts);
    const std::size_t r = parts.front().value().rank() == 2 ? parts.front().value().rows() : 0;
    std::size_t cols = 0;
    std::vector<std::size_t> ids, col_offsets, widths;
    for (const Var& p : parts) {
        expect_rank(p.value(), 2, "concat_cols");
        MOCL_EXPECT(p.value().rows() == r, "concat_cols: row counts differ");
        ids.push_back(p.id());
        col_offsets.push_back(cols);
        widths.push_back(p.value().cols());
        cols += p.value().cols();
    }
    Tensor out({r, cols}, 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out.at(i, col_offsets[k] + j) = pv.at(i, j);
    }
    return t.record(std::move(out), parts,
                    [ids = std::move(ids), col_offsets = std::move(col_offsets), widths = std::move(widths), r,
                     cols](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad_acc(self);
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (!tp.tracks(ids[k])) continue;
                            Tensor& gp = tp.grad_acc(ids[k]);
                            for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                    gp[i * widths[k] + j] += g[i * cols + col_offsets[k] + j];
                        }
                    });
}

Var slice_cols(Var x, std::size_t start, std::size_t len) {
    Tape& t = same_tape({x});
    const Tensor& xv = x.value();
    expect_rank(xv, 2, "slice_cols");
    MOCL_EXPECT(start + len <= xv.cols(), "slice_cols: range exceeds " + std::to_string(xv.cols()) + " columns");
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out({r, len}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) out.at(i, j) = xv.at(i, start + j);
    return t.record(std::move(out), {x}, [ix = x.id(), r, c, start, len](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        Tensor& gx = tp.grad_acc(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < len; ++j) gx[i * c + start + j] += g[i * len + j];
    });
}

Var slice(Var x, std::size_t offset, Shape shape) {
    Tape& t = same_tape({x});
    const Tensor& xv = x.value();
    const std::size_t n = shape_size(shape);
    MOCL_EXPECT(offset + n <= xv.size(), "slice: range exceeds tensor of size " + std::to_string(xv.size()));
    std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(offset),
                             xv.data().begin() + static_cast<std::ptrdiff_t>(offset + n));
    return t.record(Tensor(std::move(shape), std::move(data)), {x},
                    [ix = x.id(), offset](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad_acc(self);
                        Tensor& gx = tp.grad_acc(ix);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                    });
}

Var stack(const std::vector<Var>& scalars) {
    Tape& t = same_tape(scalars);
    std::vector<double> data;
    std::vector<std::size_t> ids;
    for (const Var& s : scalars) {
        MOCL_EXPECT(s.value().size() == 1, "stack: operands must be scalars");
        data.push_back(s.value()[0]);
        ids.push_back(s.id());
    }
    const std::size_t n = data.size();
    return t.record(Tensor({n}, std::move(data)), scalars, [ids = std::move(ids)](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        for (std::size_t k = 0; k < ids.size(); ++k)
            if (tp.tracks(ids[k])) tp.grad_acc(ids[k])[0] += g[k];
    });
}

Var element(Var x, std::size_t index) {
    Tape& t = same_tape({x});
    MOCL_EXPECT(index < x.value().size(), "element: index out of range");
    return t.record(Tensor::scalar(x.value()[index]), {x}, [ix = x.id(), index](Tape& tp, std::size_t self) {
        tp.grad_acc(ix)[index] += tp.grad_acc(self)[0];
    });
}

Var weighted_sum(const std::vector<Var>& tensors, Var weights) {
    std::vector<Var> all = tensors;
    all.push_back(weights);
    Tape& t = same_tape(all);
    const Tensor& w = weights.value();
    MOCL_EXPECT(w.rank() == 1 && w.size() == tensors.size(),
                "weighted_sum: " + std::to_string(w.size()) + " weights for " + std::to_string(tensors.size()) +
                    " tensors");
    const Shape& shape = tensors.front().value().shape();
    for (const Var& v : tensors)
        MOCL_EXPECT(v.value().shape() == shape, "weighted_sum: tensor shapes differ (" + shape_str(shape) + " vs " +
                                                    shape_str(v.value().shape()) + ")");
    Tensor out(shape, 0.0);
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        const Tensor& tk = tensors[k].value();
        const double wk = w[k];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * tk[i];
    }
    std::vector<std::size_t> ids;
    for (const Var& v : tensors) ids.push_back(v.id());
    return t.record(std::move(out), all, [ids = std::move(ids), iw = weights.id()](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_acc(self);
        const Tensor& w = tp.value(iw);
        const bool track_w = tp.tracks(iw);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const Tensor& tk = tp.value(ids[k]);
            if (track_w) {
                double d = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) d += g[i] * tk[i];
                tp.grad_acc(iw)[k] += d;
            }
            if (tp.tracks(ids[k])) {
                Tensor& gk = tp.grad_acc(ids[k]);
                for (std::size_t i = 0; i < g.size(); ++i) gk[i] += w[k] * g[i];
            }
        }
    });
}

Var scaled_dot_product_attention(Var q, Var k, Var v) {
    const double d = static_cast<double>(q.value().cols());
    Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d));
    return matmul(softmax(scores, 1), v);
}

}  // namespace mocl
