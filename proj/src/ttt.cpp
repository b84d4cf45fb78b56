#include "tttseg/ttt.hpp"

#include <cmath>
#include <memory>
#include <optional>

namespace tttseg {

// --- inner model ---------------------------------------------------------------

InnerModel InnerModel::linear_init(std::size_t dim, Rng& rng, double std_dev) {
  InnerModel m;
  m.kind = InnerModelKind::Linear;
  m.w = rng.normal_tensor({dim, dim}, 0.0, std_dev);
  return m;
}

InnerModel InnerModel::mlp_init(std::size_t dim, Rng& rng, double std_dev) {
  InnerModel m;
  m.kind = InnerModelKind::Mlp;
  m.w1 = rng.normal_tensor({4 * dim, dim}, 0.0, std_dev);
  m.b1 = Tensor::zeros({4 * dim});
  m.w2 = rng.normal_tensor({dim, 4 * dim}, 0.0, std_dev);
  m.b2 = Tensor::zeros({dim});
  return m;
}

std::size_t InnerModel::dim() const {
  return kind == InnerModelKind::Linear ? w.extent(0) : w2.extent(0);
}

InnerModelVars InnerModelVars::from(const InnerModel& m, bool trainable) {
  auto lift = [trainable](const Tensor& t) { return trainable ? Value::leaf(t) : Value::constant(t); };
  InnerModelVars v;
  v.kind = m.kind;
  if (m.kind == InnerModelKind::Linear) {
    v.w = lift(m.w);
  } else {
    v.w1 = lift(m.w1);
    v.b1 = lift(m.b1);
    v.w2 = lift(m.w2);
    v.b2 = lift(m.b2);
  }
  return v;
}

TTTLayerParams TTTLayerParams::init(std::size_t dim, InnerModelKind kind, Rng& rng) {
  TTTLayerParams p;
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(dim));
  p.train_proj = rng.normal_tensor({dim, dim}, 0.0, std_dev);
  p.label_proj = rng.normal_tensor({dim, dim}, 0.0, std_dev);
  p.test_proj = rng.normal_tensor({dim, dim}, 0.0, std_dev);
  p.inner_init = kind == InnerModelKind::Linear ? InnerModel::linear_init(dim, rng)
                                                : InnerModel::mlp_init(dim, rng);
  return p;
}

void TTTLayerParams::validate() const {
  const std::size_t d = inner_init.dim();
  auto square = [d](const Tensor& t, const char* name) {
    if (t.rank() != 2 || t.extent(0) != d || t.extent(1) != d) {
      throw ShapeError(std::string(name) + " must be [" + std::to_string(d) + "x" + std::to_string(d) +
                       "], got " + shape_str(t.shape()));
    }
  };
  square(train_proj, "train_proj");
  square(label_proj, "label_proj");
  square(test_proj, "test_proj");
  // eta = 0 freezes the inner model, useful for ablation; negative is invalid.
  if (inner_lr < 0.0) throw ValueError("inner_lr must be >= 0");
  if (corruption_ratio < 0.0 || corruption_ratio >= 1.0) {
    throw ValueError("corruption_ratio must lie in [0, 1)");
  }
  if (inner_init.kind == InnerModelKind::Mlp) {
    if (inner_init.w1.extent(0) != 4 * d || inner_init.w1.extent(1) != d ||
        inner_init.w2.extent(0) != d || inner_init.w2.extent(1) != 4 * d) {
      throw ShapeError("mlp inner model must have hidden width 4D");
    }
  }
}

TTTLayerVars TTTLayerVars::from(const TTTLayerParams& p, bool trainable) {
  p.validate();
  auto lift = [trainable](const Tensor& t) { return trainable ? Value::leaf(t) : Value::constant(t); };
  TTTLayerVars v;
  v.train_proj = lift(p.train_proj);
  v.label_proj = lift(p.label_proj);
  v.test_proj = lift(p.test_proj);
  v.inner_init = InnerModelVars::from(p.inner_init, trainable);
  v.inner_lr = p.inner_lr;
  v.variant = p.variant;
  v.corruption_ratio = p.corruption_ratio;
  v.corruption_seed = p.corruption_seed;
  return v;
}

// --- core ops -------------------------------------------------------------------

namespace {

Value as_col(const Value& v, const char* name) {
  const Tensor& t = v.val();
  if (t.rank() == 2 && t.extent(1) == 1) return v;
  if (t.rank() == 1) return reshape(v, {t.extent(0), 1});
  throw ShapeError(std::string(name) + " must be a token column, got " + shape_str(t.shape()));
}

Value col_from_vec(const Value& v) { return reshape(v, {v.val().size(), 1}); }

void check_finite_update(const Tensor& t) {
  if (!all_finite(t)) throw NumericError("non-finite inner gradient update in ttt_step");
}

}  // namespace

Value inner_model_apply(const InnerModelVars& f, const Value& u) {
  Value uc = as_col(u, "inner model input");
  if (f.kind == InnerModelKind::Linear) return matmul(f.w, uc);
  Value hidden = gelu(add(matmul(f.w1, uc), col_from_vec(f.b1)));
  return add(matmul(f.w2, hidden), col_from_vec(f.b2));
}

Tensor corruption_mask(std::size_t dim, double ratio, std::uint64_t seed, std::size_t token_index) {
  Tensor m({dim, 1});
  for (std::size_t j = 0; j < dim; ++j) {
    m[j] = Rng::uniform_at(seed, static_cast<std::uint64_t>(token_index) * dim + j) < 1.0 - ratio ? 1.0 : 0.0;
  }
  return m;
}

Value ttt_loss_views(const InnerModelVars& w, const Value& train_view, const Value& label_view) {
  Value r = sub(inner_model_apply(w, as_col(train_view, "train view")), as_col(label_view, "label view"));
  return sum_all(mul(r, r));
}

Value ttt_loss(const InnerModelVars& w, const Value& x_t, const TTTLayerVars& p, std::size_t token_index) {
  Value x = as_col(x_t, "token");
  if (p.variant == TTTVariant::Multiview) {
    return ttt_loss_views(w, matmul(p.train_proj, x), matmul(p.label_proj, x));
  }
  const std::size_t d = x.val().extent(0);
  Value mask = Value::constant(corruption_mask(d, p.corruption_ratio, p.corruption_seed, token_index));
  return ttt_loss_views(w, mul(x, mask), x);
}

std::pair<Value, InnerModelVars> ttt_step_views(const InnerModelVars& w, const Value& k, const Value& v,
                                                const Value& q, double eta, ScanMode mode) {
  Value kc = as_col(k, "train view");
  Value vc = as_col(v, "label view");
  Value qc = as_col(q, "test view");

  InnerModelVars updated;
  updated.kind = w.kind;
  {
    // In StopGradient mode the update runs off-tape, so every op below
    // produces constants and the outer loop never differentiates through it.
    std::optional<NoGradGuard> guard;
    if (mode == ScanMode::StopGradient) guard.emplace();

    if (w.kind == InnerModelKind::Linear) {
      // grad ell = 2 (W k - v) k^T for the quadratic reconstruction loss.
      Value residual = sub(matmul(w.w, kc), vc);
      Value grad = scale(matmul(residual, transpose(kc)), 2.0);
      updated.w = sub(w.w, scale(grad, eta));
      check_finite_update(updated.w.val());
    } else {
      // Hand-unrolled backprop through f(k) = W2 gelu(W1 k + b1) + b2, kept in
      // forward tape ops so outer gradients can flow through the update.
      Value pre = add(matmul(w.w1, kc), col_from_vec(w.b1));
      Value hidden = gelu(pre);
      Value out = add(matmul(w.w2, hidden), col_from_vec(w.b2));
      Value g_out = scale(sub(out, vc), 2.0);
      Value g_w2 = matmul(g_out, transpose(hidden));
      Value g_hidden = matmul(transpose(w.w2), g_out);
      Value g_pre = mul(g_hidden, gelu_derivative_expr(pre));
      Value g_w1 = matmul(g_pre, transpose(kc));

      updated.w1 = sub(w.w1, scale(g_w1, eta));
      updated.b1 = sub(w.b1, scale(reshape(g_pre, w.b1.shape()), eta));
      updated.w2 = sub(w.w2, scale(g_w2, eta));
      updated.b2 = sub(w.b2, scale(reshape(g_out, w.b2.shape()), eta));
      check_finite_update(updated.w1.val());
      check_finite_update(updated.w2.val());
    }
  }
  return {inner_model_apply(updated, qc), updated};
}

std::pair<Value, TTTScanState> ttt_step(const TTTScanState& state, const Value& x_t, const TTTLayerVars& p,
                                        ScanMode mode) {
  Value x = as_col(x_t, "token");
  Value k, v;
  if (p.variant == TTTVariant::Multiview) {
    k = matmul(p.train_proj, x);
    v = matmul(p.label_proj, x);
  } else {
    const std::size_t d = x.val().extent(0);
    k = mul(x, Value::constant(corruption_mask(d, p.corruption_ratio, p.corruption_seed, state.token_index)));
    v = x;
  }
  Value q = matmul(p.test_proj, x);
  auto [z, weights] = ttt_step_views(state.weights, k, v, q, p.inner_lr, mode);
  return {z, TTTScanState{weights, state.token_index + 1}};
}

Value ttt_scan_views(const Value& k_rows, const Value& v_rows, const Value& q_rows,
                     const InnerModelVars& w0, double eta, ScanMode mode) {
  const Tensor& kv = k_rows.val();
  if (kv.rank() != 2 || !kv.same_shape(v_rows.val()) || !kv.same_shape(q_rows.val())) {
    throw ShapeError("scan views must share one [T x D] shape");
  }
  const std::size_t t_len = kv.extent(0), d = kv.extent(1);
  InnerModelVars w = w0;
  std::vector<Value> outputs;
  outputs.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    Value k = reshape(narrow(k_rows, 0, t, 1), {d, 1});
    Value v = reshape(narrow(v_rows, 0, t, 1), {d, 1});
    Value q = reshape(narrow(q_rows, 0, t, 1), {d, 1});
    auto [z, next] = ttt_step_views(w, k, v, q, eta, mode);
    w = next;
    outputs.push_back(reshape(z, {1, d}));
  }
  return concat(outputs, 0);
}

Value ttt_scan(const Value& x, const TTTLayerVars& p, ScanMode mode) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("ttt_scan expects [T x D] tokens, got " + shape_str(xv.shape()));
  const std::size_t t_len = xv.extent(0), d = xv.extent(1);
  if (p.train_proj.val().extent(0) != d) {
    throw ShapeError("token dim " + std::to_string(d) + " does not match layer dim " +
                     std::to_string(p.train_proj.val().extent(0)));
  }
  Value q_rows = linear_tokens(x, p.test_proj, Value());
  Value k_rows, v_rows;
  if (p.variant == TTTVariant::Multiview) {
    k_rows = linear_tokens(x, p.train_proj, Value());
    v_rows = linear_tokens(x, p.label_proj, Value());
  } else {
    Tensor mask({t_len, d});
    for (std::size_t t = 0; t < t_len; ++t) {
      Tensor row = corruption_mask(d, p.corruption_ratio, p.corruption_seed, t);
      std::copy(row.data(), row.data() + d, mask.data() + t * d);
    }
    k_rows = mul(x, Value::constant(mask));
    v_rows = x;
  }
  return ttt_scan_views(k_rows, v_rows, q_rows, p.inner_init, p.inner_lr, mode);
}

// --- RNN baseline ----------------------------------------------------------------

void RnnParams::validate() const {
  const std::size_t d = state_matrix.extent(0);
  auto square = [d](const Tensor& t, const char* name) {
    if (t.rank() != 2 || t.extent(0) != d || t.extent(1) != d) {
      throw ShapeError(std::string(name) + " must be square [DxD]");
    }
  };
  square(state_matrix, "state_matrix");
  square(input_matrix, "input_matrix");
  square(output_matrix, "output_matrix");
}

Value rnn_scan(const Value& x, const RnnParams& p, const Value& h0) {
  p.validate();
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("rnn_scan expects [T x D] tokens");
  const std::size_t t_len = xv.extent(0), d = xv.extent(1);
  if (p.state_matrix.extent(0) != d || h0.val().size() != d) {
    throw ShapeError("rnn dimension mismatch: tokens " + shape_str(xv.shape()) + " vs state dim " +
                     std::to_string(p.state_matrix.extent(0)));
  }
  Value wh = Value::constant(p.state_matrix);
  Value wx = Value::constant(p.input_matrix);
  Value wo = Value::constant(p.output_matrix);
  Value h = reshape(h0, {d, 1});
  std::vector<Value> outputs;
  outputs.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    Value xt = reshape(narrow(x, 0, t, 1), {d, 1});
    h = activation(p.act, add(matmul(wh, h), matmul(wx, xt)));
    outputs.push_back(reshape(matmul(wo, h), {1, d}));
  }
  return concat(outputs, 0);
}

}  // namespace tttseg
