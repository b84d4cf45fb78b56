#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tttseg/errors.hpp"

namespace tttseg {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense n-dimensional array of 64-bit floats, flat row-major storage.
// Rank 0 is a scalar (one element). Immutable by convention once built;
// operations below are pure functions.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Value of a one-element tensor (any rank).
  double item() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool is_scalar() const { return data_.size() == 1; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const Shape& s);
bool all_finite(const Tensor& t);

namespace detail {
// c[m x n] (+)= a[m x k] b[k x n] with explicit row strides. Every output
// element accumulates over k in ascending order; output rows may run on
// different threads.
void gemm_rowmajor(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                   std::size_t ldc, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// c[m x n] (+)= a[m x p] b[n x p]^T, row-major dot-product form.
void gemm_abt(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
              std::size_t ldc, std::size_t m, std::size_t p, std::size_t n, bool accumulate);
}  // namespace detail

// --- linear algebra ---------------------------------------------------------

// Matrix product of a [m x k] and b [k x n]. Accumulation over k is fixed
// left-to-right so results are bit-reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

// --- elementwise ------------------------------------------------------------
// Operands must have equal shapes, except that a one-element tensor on either
// side broadcasts as a scalar. No other implicit broadcasting.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product for equal shapes
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// --- reductions -------------------------------------------------------------

enum class ReduceOp { Sum, Mean, Max };

// Reduces over the given axes (removed from the result). Empty axis list is
// invalid; use reduce_all for a full reduction to a scalar.
Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reduce_all(ReduceOp op, const Tensor& a);

double sum_all(const Tensor& a);

// --- layout -----------------------------------------------------------------

// Same data, new shape; element counts must match.
Tensor reshape(const Tensor& a, Shape new_shape);

// Flattens a [C x H x W] feature map to [H*W x C] tokens in raster order over
// (H, W): token h*W + w holds the C channel values at pixel (h, w). This order
// is the contract for every sequence scan.
Tensor chw_to_tokens(const Tensor& a);
Tensor tokens_to_chw(const Tensor& a, std::size_t channels, std::size_t h, std::size_t w);

// Axis permutation (data is copied into the new layout).
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
// 2-D transpose shorthand.
Tensor transpose(const Tensor& a);

// Contiguous slice of `len` entries starting at `start` along `axis`.
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
// Concatenation along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// --- rng --------------------------------------------------------------------

// splitmix64: fixed shift/multiply generator, identical sequences on every
// platform for a given seed. Gaussian samples via Box-Muller pairs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                                   // [0, 1)
  std::uint64_t uniform_int(std::uint64_t n);         // [0, n)
  double normal(double mean, double std_dev);
  Tensor normal_tensor(const Shape& shape, double mean, double std_dev);

  // Independent substream derived from this rng's seed and a label.
  Rng fork(std::uint64_t label) const;

  // Stateless counter-based access: the i-th value of the seed's sequence.
  static std::uint64_t u64_at(std::uint64_t seed, std::uint64_t index);
  static double uniform_at(std::uint64_t seed, std::uint64_t index);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tttseg
