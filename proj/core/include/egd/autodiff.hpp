#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "egd/ops.hpp"
#include "egd/tensor.hpp"

namespace egd {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Accumulated gradient after Tape::backward. Empty for nodes that received
  // none or do not require gradients.
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Called with every gradient contribution an operation produces for one of
// its inputs, before it is accumulated. Used to inject faults in tests.
using BackwardHook = std::function<void(std::string_view op, Tensor& contribution)>;

// Minimal reverse-mode tape over rank-2 tensors. Every operation records its
// output together with a closure that maps the output gradient to input
// gradients. Nodes are stored in recording order, so a reverse sweep is a
// valid topological order.
class Tape {
 public:
  // Receives the output gradient and the recorded output value.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Owned leaf whose gradient is readable through Var::grad.
  Var variable(Tensor value);
  // Leaf referencing an external tensor. Gradients are added into `sink`,
  // which must have the same shape as `value` and outlive the tape.
  Var parameter(const Tensor& value, Tensor& sink);
  // Non-differentiable leaf referencing an external tensor.
  Var reference(const Tensor& value);

  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  // Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps backwards.
  void backward(Var out);

  // Adds `contribution` into the gradient of `target`. No-op when the target
  // does not require gradients.
  void accumulate(Var target, Tensor contribution);
  // Sparse variant: row r of `rows` is added into row indices[r] of target.
  void accumulate_rows(Var target, std::span<const std::size_t> indices, Tensor rows);

  void set_backward_hook(BackwardHook hook) { hook_ = std::move(hook); }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    std::string_view op;
    BackwardFn backward;

    const Tensor& val() const { return external ? *external : value; }
  };

  Tensor& grad_storage(Node& n);
  void apply_hook(Tensor& contribution);

  std::deque<Node> nodes_;
  BackwardHook hook_;
  std::string_view current_op_;
};

// Differentiable operations. All operate on rank-2 values.
namespace ad {

Var matmul(Var a, Var b);
Var matmul_bt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_row(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
Var scale(Var a, double s);
Var mul(Var a, Var b);  // elementwise
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var softmax_rows(Var a);
// Row softmax after adding kMaskedLogit to disallowed entries.
Var masked_softmax_rows(Var a, const AttentionMask& mask);
Var layer_norm_rows(Var x, Var gain, Var bias);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var table, std::vector<std::size_t> indices);
// base with row src[r] added into row indices[r].
Var scatter_add_rows(Var base, Var src, std::vector<std::size_t> indices);
Var rowwise_dot(Var a, Var b);   // m x 1
Var scale_rows(Var a, Var s);    // s is m x 1
Var l2_normalize_rows(Var a, double eps = kL2Eps);
Var sum(Var a);                  // 1 x 1
// z = mu + exp(0.5 * log_var) * eps
Var reparameterize(Var mu, Var log_var, const Tensor& eps);
// 0.5 * sum(mu^2 + exp(log_var) - log_var - 1), 1 x 1
Var gaussian_kl(Var mu, Var log_var);
// sum over rows r and columns i of -[y log p + (1 - y) log(1 - p)] with y the
// one-hot row for targets[r]; log arguments are clamped at kLogFloor.
inline constexpr double kLogFloor = 1e-12;
Var catalog_bce(Var probs, std::vector<std::size_t> targets);
// catalog_bce(softmax_rows(z * items^T), targets) without keeping the
// rows x catalog score matrix on the tape; scores are recomputed in row
// blocks during the backward sweep.
Var softmax_catalog_bce(Var z, Var items, std::vector<std::size_t> targets);

}  // namespace ad

}  // namespace egd
