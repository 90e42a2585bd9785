#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "mocl/tensor.hpp"

namespace mocl {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    bool valid() const noexcept { return tape_ != nullptr; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

 private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in creation order, so every node's inputs precede it and a
/// single reverse sweep over the node list is a valid reverse topological order.
/// Nodes that do not depend on any requires_grad leaf carry no backward closure.
class Tape {
 public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked input. Gradients are accumulated for it when requires_grad is set.
    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value);
    /// Constant that references caller-owned storage, which must outlive the tape.
    Var borrow(const Tensor& value);

    /// Populates gradients for every node reachable from `loss`. One call per recording.
    void backward(Var loss);
    bool backward_done() const noexcept { return backward_done_; }

    /// Gradient of the last backward() target w.r.t. `v`; exactly zero if `v` did not participate.
    const Tensor& grad(Var v) const;

    void reset();
    std::size_t size() const noexcept { return nodes_.size(); }

    // --- op-implementer interface ---
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
    const Tensor& value(std::size_t id) const;
    bool tracks(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient accumulator of node `id`, zero-initialized on first use.
    Tensor& grad_acc(std::size_t id);

 private:
    friend class Var;

    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
    mutable std::deque<Tensor> zero_grads_;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Kernels. All operands must live on the same tape. Vectors are rank-1 tensors,
// matrices rank-2 with [rows, cols].

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_rowwise(Var x, Var bias);
Var matmul(Var a, Var b);
/// W [r, c] times vector h [c] -> [r].
Var matvec(Var w, Var h);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

/// Softmax along `axis` (rank-1: axis 0; rank-2: 0 = down columns, 1 = along rows).
Var softmax(Var x, std::size_t axis);
Var layer_norm(Var x, Var gain, Var bias);
/// Mean over `axis` of a rank-2 tensor; result is rank-1.
Var mean(Var x, std::size_t axis);
Var sum(Var x);
Var relu(Var x);
Var gelu(Var x);

/// Negative log-likelihood of `label` under softmax(logits); logits rank-1.
Var cross_entropy(Var logits, std::size_t label);
/// cos(a, b) of two rank-1 tensors; throws DomainError on an exactly-zero operand.
Var cosine(Var a, Var b);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, std::size_t start, std::size_t len);
/// Contiguous flat slice [offset, offset + size(shape)) viewed with `shape`.
Var slice(Var x, std::size_t offset, Shape shape);
Var stack(const std::vector<Var>& scalars);
Var element(Var x, std::size_t index);

/// Elementwise sum_k weights[k] * tensors[k].
Var weighted_sum(const std::vector<Var>& tensors, Var weights);

/// softmax(q k^T / sqrt(d_k)) v.
Var scaled_dot_product_attention(Var q, Var k, Var v);

// Value-level helpers shared with tests and non-differentiable paths.
double layer_norm_epsilon();
double cosine_value(const Tensor& a, const Tensor& b);

}  // namespace mocl
