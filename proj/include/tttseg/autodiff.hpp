#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tttseg/tensor.hpp"

namespace tttseg {

// Tape-based reverse-mode autodiff with dynamic graph construction. Nodes are
// created eagerly by the op wrappers below; backward() walks the graph from a
// scalar root in reverse topological order. Graphs are single-threaded;
// distinct graphs may live on distinct threads.

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  ~Node();
};

// Handle to a node. Copying shares the node.
class Value {
 public:
  Value() = default;

  // A differentiable input (parameter or checked input). Its grad accumulates
  // across backward() calls until zero_grad().
  static Value leaf(Tensor t);
  // A value gradients never flow into.
  static Value constant(Tensor t);

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Accumulated gradient; exact zeros if nothing reached this node.
  Tensor grad() const;
  void zero_grad();

  // Replaces the stored tensor. Leaves only (no parents).
  void set_value(Tensor t);

  std::shared_ptr<Node> node() const { return node_; }
  explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// While alive, every op produces constants (no tape). Used for inference and
// for the finite-difference side of gradcheck.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

namespace detail {
// Builds an op node: constant if grad is disabled or no input requires grad.
// Backprop closures must not capture Values or shared_ptr<Node>; reach parents
// through node.parents (same order as `inputs`).
Value make_op(Tensor out, const std::vector<Value>& inputs, std::function<void(Node&)> backprop);
// Accumulates g into n.grad (no-op when n does not require grad).
void accum(Node& n, const Tensor& g);
}  // namespace detail

// --- differentiable ops -----------------------------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);  // Hadamard for equal shapes
Value div(const Value& a, const Value& b);
Value scale(const Value& a, double s);
Value neg(const Value& a);
Value add_scalar(const Value& a, double s);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

Value matmul(const Value& a, const Value& b);

Value sum_all(const Value& a);   // rank-0 result
Value mean_all(const Value& a);  // rank-0 result

Value reshape(const Value& a, Shape new_shape);
Value transpose(const Value& a, const std::vector<std::size_t>& perm);
Value transpose(const Value& a);  // 2-D
Value narrow(const Value& a, std::size_t axis, std::size_t start, std::size_t len);
Value concat(const std::vector<Value>& parts, std::size_t axis);

// log(max(x, floor)); zero gradient on the clamped branch.
Value log_clamped(const Value& a, double floor = 1e-12);
Value tanh(const Value& a);

// Identity on values; contributes zero gradient to its input.
Value stop_gradient(const Value& a);
// Identity on values; scales the flowing gradient by k. Test harness hook for
// deliberately breaking a backward rule.
Value grad_scale(const Value& a, double k);

// Runs reverse-mode accumulation from a one-element root. Internal node grads
// are reset per call; leaf grads accumulate across calls (zero_grad() between
// optimizer steps). Deterministic: repeated calls from the same graph state
// give bit-identical gradients.
void backward(const Value& root);

// --- finite-difference gradient checking ------------------------------------

struct GradCheckCoord {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct ParamGradReport {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  GradCheckCoord worst;
};

struct GradReport {
  double max_rel_error = 0.0;
  std::vector<ParamGradReport> params;
};

struct GradCheckOpts {
  double epsilon = 1e-5;  // central differences
  std::size_t max_coords_per_param = 1000;
  std::uint64_t seed = 0x5eedC0de;
};

// Compares backward() against (fn(p+eps e) - fn(p-eps e)) / 2eps per
// coordinate, subsampling above max_coords_per_param. fn must be a
// deterministic map from the given tensors to a one-element Value.
// Relative error is |a-n| / max(|a|, |n|, 1e-8).
GradReport gradcheck(const std::function<Value(const std::vector<Value>&)>& fn,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     const GradCheckOpts& opts = {});

}  // namespace tttseg
