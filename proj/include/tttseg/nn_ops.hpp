#pragma once

#include <optional>

#include "tttseg/autodiff.hpp"
#include "tttseg/tensor.hpp"

namespace tttseg {

// Negative slope of LeakyReLU (nnU-Net convention). The subgradient at
// exactly 0 uses the negative-slope branch.
inline constexpr double kLeakyReluSlope = 0.01;

// Default epsilon for instance/layer norm.
inline constexpr double kNormEps = 1e-5;

// Convolution parameter pack. Empty bias means no bias term. For
// conv_transpose2d the weight keeps the conv layout [outC x inC x kh x kw]:
// the transpose maps outC-channel inputs to inC-channel outputs, and bias (if
// present) has length inC.
struct Conv2dParams {
  Tensor weight;  // [outC x inC x kh x kw]
  std::optional<Tensor> bias;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
};

struct NormParams {
  Tensor gain;    // [C]
  Tensor offset;  // [C]
  double epsilon = kNormEps;
};

enum class Activation { Identity, LeakyRelu, Silu, Gelu, Tanh };

// --- raw kernels (no tape) ---------------------------------------------------
// Cross-correlation convention (no kernel flip), zero padding, accumulation
// order fixed over (inC, kh, kw) so results are bit-reproducible.

Tensor conv2d_raw(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph, int pw);
Tensor conv2d_input_grad_raw(const Tensor& gy, const Tensor& w, std::size_t h, std::size_t w_in, int sh,
                             int sw, int ph, int pw);
Tensor conv2d_weight_grad_raw(const Tensor& x, const Tensor& gy, std::size_t kh, std::size_t kw, int sh,
                              int sw, int ph, int pw);
Tensor conv_transpose2d_raw(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph,
                            int pw);

// --- differentiable ops -------------------------------------------------------

// x: [N x C x H x W], w: [outC x inC x kh x kw], bias optional [outC].
// Output extent: H' = floor((H + 2 ph - kh) / sh) + 1, and same for W.
Value conv2d(const Value& x, const Value& w, const Value& bias, int sh, int sw, int ph, int pw);

// Adjoint of conv2d with the same (w, stride, pad):
// <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> for zero bias.
// Output extent: H' = (H - 1) sh - 2 ph + kh.
Value conv_transpose2d(const Value& x, const Value& w, const Value& bias, int sh, int sw, int ph, int pw);

// Per-(sample, channel) standardization over spatial dims, biased variance.
Value instance_norm(const Value& x, const Value& gain, const Value& offset, double eps = kNormEps);

// Per-row standardization over the last dimension, biased variance.
Value layer_norm(const Value& x, const Value& gain, const Value& offset, double eps = kNormEps);

Value leaky_relu(const Value& x, double slope = kLeakyReluSlope);
Value silu(const Value& x);
Value gelu(const Value& x);
Value activation(Activation kind, const Value& x);

// Numerically stabilized softmax along `axis` (max subtraction per slice).
Value softmax(const Value& x, std::size_t axis);

// y = x w^T + bias per row; x: [T x Din], w: [Dout x Din], bias opt [Dout].
Value linear_tokens(const Value& x, const Value& w, const Value& bias);

// Depthwise causal 1-D convolution along tokens: x [T x D], w [D x K],
// y[t][d] = sum_j w[d][j] x[t - (K-1) + j][d] with zero padding on the left.
// Output token t never sees tokens later than t.
Value causal_dwconv(const Value& x, const Value& w);

// GELU derivative built from tape primitives, so outer gradients can flow
// through hand-unrolled inner-loop updates that multiply by it.
Value gelu_derivative_expr(const Value& x);

// Plain-tensor conveniences for the parameter packs above.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);
Tensor conv_transpose2d(const Tensor& x, const Conv2dParams& p);
Tensor instance_norm(const Tensor& x, const NormParams& p);
Tensor layer_norm(const Tensor& x, const NormParams& p);

}  // namespace tttseg
