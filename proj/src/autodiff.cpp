#include "tttseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace tttseg {

Node::~Node() {
  // Iterative teardown: deep scan graphs would otherwise recurse through
  // shared_ptr destructors and overflow the stack.
  std::vector<std::shared_ptr<Node>> work;
  work.swap(parents);
  while (!work.empty()) {
    std::shared_ptr<Node> n = std::move(work.back());
    work.pop_back();
    if (n && n.use_count() == 1) {
      for (auto& p : n->parents) work.push_back(std::move(p));
      n->parents.clear();
    }
  }
}

namespace {
thread_local bool g_grad_enabled = true;

void add_inplace(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Value Value::leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->is_leaf = true;
  return Value(std::move(n));
}

Value Value::constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Value(std::move(n));
}

Tensor Value::grad() const {
  if (node_->has_grad) return node_->grad;
  return Tensor::zeros(node_->value.shape());
}

void Value::zero_grad() {
  node_->has_grad = false;
  node_->grad = Tensor();
}

void Value::set_value(Tensor t) {
  if (!node_->parents.empty()) throw ValueError("set_value is only valid on leaf/constant nodes");
  if (t.shape() != node_->value.shape()) {
    throw ShapeError("set_value shape mismatch: " + shape_str(t.shape()) + " vs " +
                     shape_str(node_->value.shape()));
  }
  node_->value = std::move(t);
}

namespace detail {

void accum(Node& n, const Tensor& g) {
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    add_inplace(n.grad, g);
  }
}

Value make_op(Tensor out, const std::vector<Value>& inputs, std::function<void(Node&)> backprop) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const Value& v : inputs) {
      if (v.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(out);
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Value& v : inputs) n->parents.push_back(v.node());
    n->backprop = std::move(backprop);
  }
  return Value(std::move(n));
}

}  // namespace detail

using detail::accum;
using detail::make_op;

// --- elementwise ------------------------------------------------------------

namespace {

// Gradient of a broadcast operand: if it entered as a one-element tensor
// against a larger one, its gradient is the full reduction of g.
Tensor reduce_for_operand(const Tensor& g, const Shape& operand_shape) {
  if (g.shape() == operand_shape) return g;
  Tensor r(operand_shape);  // one element
  r[0] = sum_all(g);
  return r;
}

}  // namespace

Value add(const Value& a, const Value& b) {
  Tensor out = add(a.val(), b.val());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    accum(*n.parents[0], reduce_for_operand(n.grad, n.parents[0]->value.shape()));
    accum(*n.parents[1], reduce_for_operand(n.grad, n.parents[1]->value.shape()));
  });
}

Value sub(const Value& a, const Value& b) {
  Tensor out = sub(a.val(), b.val());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    accum(*n.parents[0], reduce_for_operand(n.grad, n.parents[0]->value.shape()));
    accum(*n.parents[1], reduce_for_operand(neg(n.grad), n.parents[1]->value.shape()));
  });
}

Value mul(const Value& a, const Value& b) {
  Tensor out = mul(a.val(), b.val());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    accum(*n.parents[0], reduce_for_operand(mul(n.grad, n.parents[1]->value), n.parents[0]->value.shape()));
    accum(*n.parents[1], reduce_for_operand(mul(n.grad, n.parents[0]->value), n.parents[1]->value.shape()));
  });
}

Value div(const Value& a, const Value& b) {
  Tensor out = div(a.val(), b.val());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    accum(*n.parents[0], reduce_for_operand(div(n.grad, bv), av.shape()));
    accum(*n.parents[1], reduce_for_operand(neg(div(mul(n.grad, av), mul(bv, bv))), bv.shape()));
  });
}

Value scale(const Value& a, double s) {
  return make_op(scale(a.val(), s), {a}, [s](Node& n) { accum(*n.parents[0], scale(n.grad, s)); });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value add_scalar(const Value& a, double s) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  return make_op(std::move(out), {a}, [](Node& n) { accum(*n.parents[0], n.grad); });
}

// --- matmul -----------------------------------------------------------------

Value matmul(const Value& a, const Value& b) {
  Tensor out = matmul(a.val(), b.val());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    accum(*n.parents[0], matmul(n.grad, transpose(bv)));
    accum(*n.parents[1], matmul(transpose(av), n.grad));
  });
}

// --- reductions -------------------------------------------------------------

Value sum_all(const Value& a) {
  return make_op(Tensor::scalar(sum_all(a.val())), {a}, [](Node& n) {
    accum(*n.parents[0], Tensor::full(n.parents[0]->value.shape(), n.grad[0]));
  });
}

Value mean_all(const Value& a) {
  const double inv = 1.0 / static_cast<double>(a.val().size());
  return make_op(Tensor::scalar(sum_all(a.val()) * inv), {a}, [inv](Node& n) {
    accum(*n.parents[0], Tensor::full(n.parents[0]->value.shape(), n.grad[0] * inv));
  });
}

// --- layout -----------------------------------------------------------------

Value reshape(const Value& a, Shape new_shape) {
  Tensor out = reshape(a.val(), new_shape);
  return make_op(std::move(out), {a}, [](Node& n) {
    accum(*n.parents[0], reshape(n.grad, n.parents[0]->value.shape()));
  });
}

Value transpose(const Value& a, const std::vector<std::size_t>& perm) {
  Tensor out = transpose(a.val(), perm);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = d;
  return make_op(std::move(out), {a}, [inv](Node& n) { accum(*n.parents[0], transpose(n.grad, inv)); });
}

Value transpose(const Value& a) { return transpose(a, {1, 0}); }

Value narrow(const Value& a, std::size_t axis, std::size_t start, std::size_t len) {
  Tensor out = narrow(a.val(), axis, start, len);
  return make_op(std::move(out), {a}, [axis, start, len](Node& n) {
    const Tensor& src = n.parents[0]->value;
    Tensor g = Tensor::zeros(src.shape());
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= src.extent(d);
    for (std::size_t d = axis + 1; d < src.rank(); ++d) inner *= src.extent(d);
    const std::size_t ext = src.extent(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* gs = n.grad.data() + o * len * inner;
      double* gd = g.data() + (o * ext + start) * inner;
      std::copy(gs, gs + len * inner, gd);
    }
    accum(*n.parents[0], g);
  });
}

Value concat(const std::vector<Value>& parts, std::size_t axis) {
  std::vector<Tensor> tensors;
  tensors.reserve(parts.size());
  for (const Value& p : parts) tensors.push_back(p.val());
  Tensor out = concat(tensors, axis);
  return make_op(std::move(out), parts, [axis](Node& n) {
    std::size_t start = 0;
    for (auto& parent : n.parents) {
      const std::size_t len = parent->value.extent(axis);
      accum(*parent, narrow(n.grad, axis, start, len));
      start += len;
    }
  });
}

// --- pointwise nonlinear ----------------------------------------------------

Value log_clamped(const Value& a, double floor) {
  const Tensor& x = a.val();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(std::max(x[i], floor));
  return make_op(std::move(out), {a}, [floor](Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > floor ? n.grad[i] / x[i] : 0.0;
    accum(*n.parents[0], g);
  });
}

Value tanh(const Value& a) {
  const Tensor& x = a.val();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved = std::move(saved)](Node& n) {
    Tensor g(saved.shape());
    for (std::size_t i = 0; i < saved.size(); ++i) g[i] = n.grad[i] * (1.0 - saved[i] * saved[i]);
    accum(*n.parents[0], g);
  });
}

Value stop_gradient(const Value& a) { return Value::constant(a.val()); }

Value grad_scale(const Value& a, double k) {
  return make_op(a.val(), {a}, [k](Node& n) { accum(*n.parents[0], scale(n.grad, k)); });
}

// --- backward ---------------------------------------------------------------

void backward(const Value& root) {
  if (!root.defined()) throw ValueError("backward on an empty value");
  if (root.val().size() != 1) {
    throw ValueError("backward requires a one-element root, got " + shape_str(root.val().shape()));
  }
  if (!root.requires_grad()) return;  // nothing differentiable below

  // Iterative post-order DFS over parent edges.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  Node* root_node = root.node().get();
  visited.insert(root_node);
  stack.push_back({root_node, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Internal grads are per-call scratch; leaf grads persist and accumulate.
  for (Node* n : order) {
    if (!n->is_leaf) {
      n->has_grad = false;
      n->grad = Tensor();
    }
  }
  accum(*root_node, Tensor::scalar(1.0));

  // Reverse post-order: every node is processed before its parents.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->has_grad) n->backprop(*n);
  }
}

// --- gradcheck --------------------------------------------------------------

namespace {

std::vector<std::size_t> sample_coords(std::size_t total, std::size_t want, std::uint64_t seed) {
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  if (want >= total) return idx;
  Rng rng(seed);
  // Partial Fisher-Yates: the first `want` entries are a uniform sample.
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(total - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(want);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double eval_scalar(const std::function<Value(const std::vector<Value>&)>& fn,
                   const std::vector<Tensor>& tensors) {
  NoGradGuard guard;
  std::vector<Value> args;
  args.reserve(tensors.size());
  for (const Tensor& t : tensors) args.push_back(Value::constant(t));
  const Value out = fn(args);
  if (out.val().size() != 1) throw ValueError("gradcheck fn must return a one-element value");
  const double v = out.val()[0];
  if (!std::isfinite(v)) throw NumericError("gradcheck fn returned a non-finite value");
  return v;
}

}  // namespace

GradReport gradcheck(const std::function<Value(const std::vector<Value>&)>& fn,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     const GradCheckOpts& opts) {
  if (opts.epsilon <= 0.0) throw ValueError("gradcheck requires epsilon > 0");

  // Analytic gradients.
  std::vector<Value> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, tensor] : params) leaves.push_back(Value::leaf(tensor));
  const Value out = fn(leaves);
  if (out.val().size() != 1) throw ValueError("gradcheck fn must return a one-element value");
  if (!std::isfinite(out.val()[0])) throw NumericError("gradcheck fn returned a non-finite value");
  backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (Value& v : leaves) analytic.push_back(v.grad());

  std::vector<Tensor> base;
  base.reserve(params.size());
  for (const auto& [name, tensor] : params) base.push_back(tensor);

  GradReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamGradReport pr;
    pr.name = params[p].first;
    const std::size_t total = base[p].size();
    const auto coords = sample_coords(total, opts.max_coords_per_param, opts.seed ^ (0x9E3779B97F4A7C15ull * (p + 1)));
    pr.coords_checked = coords.size();
    for (std::size_t ci : coords) {
      const double saved = base[p][ci];
      base[p][ci] = saved + opts.epsilon;
      const double fp = eval_scalar(fn, base);
      base[p][ci] = saved - opts.epsilon;
      const double fm = eval_scalar(fn, base);
      base[p][ci] = saved;
      const double numeric = (fp - fm) / (2.0 * opts.epsilon);
      const double a = analytic[p][ci];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel >= pr.max_rel_err) {
        pr.max_rel_err = rel;
        pr.worst = GradCheckCoord{ci, a, numeric, rel};
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, pr.max_rel_err);
    report.params.push_back(std::move(pr));
  }
  return report;
}

}  // namespace tttseg
