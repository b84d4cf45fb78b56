#pragma once

#include <cstdint>
#include <utility>

#include "tttseg/nn_ops.hpp"

namespace tttseg {

// Sequence layers whose hidden state is a small inner model f with weights W,
// updated by one self-supervised gradient step per token during the forward
// scan: W_t = W_{t-1} - eta * grad ell(W_{t-1}; x_t), z_t = f(test view; W_t).
// The update is expressed in forward tape ops (closed form for the linear
// model, hand-unrolled backprop for the MLP), so outer training can
// differentiate through the whole unrolled scan.

enum class InnerModelKind { Linear, Mlp };
enum class TTTVariant { Multiview, Naive };
enum class ScanMode { Differentiable, StopGradient };

// Inner model: f(u) = W u, or the 2-layer MLP W2 gelu(W1 u + b1) + b2 with
// hidden width 4D.
struct InnerModel {
  InnerModelKind kind = InnerModelKind::Linear;
  Tensor w;   // linear [D x D]
  Tensor w1;  // mlp [4D x D]
  Tensor b1;  // mlp [4D]
  Tensor w2;  // mlp [D x 4D]
  Tensor b2;  // mlp [D]

  static InnerModel linear_init(std::size_t dim, Rng& rng, double std_dev = 0.02);
  static InnerModel mlp_init(std::size_t dim, Rng& rng, double std_dev = 0.02);
  std::size_t dim() const;
};

struct InnerModelVars {
  InnerModelKind kind = InnerModelKind::Linear;
  Value w;
  Value w1, b1, w2, b2;

  static InnerModelVars from(const InnerModel& m, bool trainable);
};

// Outer parameters of one TTT layer. The projections produce the training
// view k = train_proj x, label view v = label_proj x and test view
// q = test_proj x. The naive variant replaces (k, v) by (corrupted x, x).
struct TTTLayerParams {
  Tensor train_proj;  // [D x D]
  Tensor label_proj;  // [D x D]
  Tensor test_proj;   // [D x D]
  InnerModel inner_init;
  double inner_lr = 0.1;  // eta, fixed hyperparameter
  TTTVariant variant = TTTVariant::Multiview;
  double corruption_ratio = 0.5;  // naive variant only
  std::uint64_t corruption_seed = 0;

  static TTTLayerParams init(std::size_t dim, InnerModelKind kind, Rng& rng);
  void validate() const;
};

struct TTTLayerVars {
  Value train_proj, label_proj, test_proj;
  InnerModelVars inner_init;
  double inner_lr = 0.1;
  TTTVariant variant = TTTVariant::Multiview;
  double corruption_ratio = 0.5;
  std::uint64_t corruption_seed = 0;

  static TTTLayerVars from(const TTTLayerParams& p, bool trainable);
};

// Evolving inner weights during a scan; reset to the layer's inner_init at
// the start of every sequence.
struct TTTScanState {
  InnerModelVars weights;
  std::size_t token_index = 0;
};

// f applied to one token column [D x 1].
Value inner_model_apply(const InnerModelVars& f, const Value& u);

// Bernoulli(1 - ratio) zero mask for token t, deterministic in (seed, t).
Tensor corruption_mask(std::size_t dim, double ratio, std::uint64_t seed, std::size_t token_index);

// Self-supervised loss of the inner weights on one token (column [D x 1]).
// Multiview: ||f(train view; W) - label view||^2; naive: ||f(x~; W) - x||^2.
Value ttt_loss(const InnerModelVars& w, const Value& x_t, const TTTLayerVars& p, std::size_t token_index);
// View-level form used by both variants and by the U-Net block.
Value ttt_loss_views(const InnerModelVars& w, const Value& train_view, const Value& label_view);

// One inner gradient step from precomputed view columns; returns the output
// token z = f(q; W_new) and the updated weights. In StopGradient mode the
// update is detached from the tape.
std::pair<Value, InnerModelVars> ttt_step_views(const InnerModelVars& w, const Value& k, const Value& v,
                                                const Value& q, double eta, ScanMode mode);

// Spec-level step: projects x_t per the layer's variant, then updates.
std::pair<Value, TTTScanState> ttt_step(const TTTScanState& state, const Value& x_t, const TTTLayerVars& p,
                                        ScanMode mode = ScanMode::Differentiable);

// Scan over precomputed view rows K, V, Q: [T x D] each. Weights restart from
// w0; tokens are visited in row order (the canonical raster order).
Value ttt_scan_views(const Value& k_rows, const Value& v_rows, const Value& q_rows,
                     const InnerModelVars& w0, double eta, ScanMode mode);

// Scan over raw tokens x: [T x D] with the layer's own projections.
Value ttt_scan(const Value& x, const TTTLayerVars& p, ScanMode mode = ScanMode::Differentiable);

// --- RNN baseline -------------------------------------------------------------

// h_t = act(state_matrix h_{t-1} + input_matrix x_t); z_t = output_matrix h_t.
struct RnnParams {
  Tensor state_matrix;   // [D x D]
  Tensor input_matrix;   // [D x D]
  Activation act = Activation::Tanh;
  Tensor output_matrix;  // [D x D]

  void validate() const;
};

Value rnn_scan(const Value& x, const RnnParams& p, const Value& h0);

}  // namespace tttseg
