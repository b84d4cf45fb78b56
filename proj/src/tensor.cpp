#include "tttseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "tttseg/parallel.hpp"

namespace tttseg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (std::size_t e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() requires a one-element tensor, got " + shape_str(shape_));
  return data_[0];
}

bool all_finite(const Tensor& t) {
  for (double v : t.vec()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// --- linear algebra ---------------------------------------------------------

namespace detail {

namespace {

// Register-blocked row kernel: the accumulators for a block of output columns
// stay in registers across the whole k loop, and every output element still
// sums over k in ascending order.
template <int Jb>
inline void gemm_row_block(const double* arow, const double* b, std::size_t ldb, double* crow,
                           std::size_t k, std::size_t j, bool accumulate) {
  double acc[Jb];
  for (int u = 0; u < Jb; ++u) acc[u] = accumulate ? crow[j + u] : 0.0;
  const double* bp = b + j;
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double av = arow[kk];
    const double* brow = bp + kk * ldb;
    for (int u = 0; u < Jb; ++u) acc[u] += av * brow[u];
  }
  for (int u = 0; u < Jb; ++u) crow[j + u] = acc[u];
}

// Ib x Jb register tile: every loaded b row feeds Ib output rows, which is
// what lifts the kernel off the memory-bandwidth floor.
template <int Ib, int Jb>
inline void gemm_tile(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                      std::size_t ldc, std::size_t k, std::size_t i0, std::size_t j0, bool accumulate) {
  double acc[Ib][Jb];
  for (int r = 0; r < Ib; ++r) {
    for (int u = 0; u < Jb; ++u) acc[r][u] = accumulate ? c[(i0 + r) * ldc + j0 + u] : 0.0;
  }
  const double* bp = b + j0;
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = bp + kk * ldb;
    for (int r = 0; r < Ib; ++r) {
      const double av = a[(i0 + r) * lda + kk];
      for (int u = 0; u < Jb; ++u) acc[r][u] += av * brow[u];
    }
  }
  for (int r = 0; r < Ib; ++r) {
    for (int u = 0; u < Jb; ++u) c[(i0 + r) * ldc + j0 + u] = acc[r][u];
  }
}

void gemm_rows(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
               std::size_t ldc, std::size_t k, std::size_t n, std::size_t i0, std::size_t rows,
               bool accumulate) {
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) {
    std::size_t r = 0;
    for (; r + 4 <= rows; r += 4) gemm_tile<4, 32>(a, lda, b, ldb, c, ldc, k, i0 + r, j, accumulate);
    for (; r < rows; ++r) gemm_row_block<32>(a + (i0 + r) * lda, b, ldb, c + (i0 + r) * ldc, k, j, accumulate);
  }
  for (; j + 8 <= n; j += 8) {
    for (std::size_t r = 0; r < rows; ++r) {
      gemm_row_block<8>(a + (i0 + r) * lda, b, ldb, c + (i0 + r) * ldc, k, j, accumulate);
    }
  }
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* arow = a + (i0 + r) * lda;
      double* crow = c + (i0 + r) * ldc;
      double acc = accumulate ? crow[j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * ldb + j];
      crow[j] = acc;
    }
  }
}

}  // namespace

void gemm_rowmajor(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                   std::size_t ldc, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t kRowChunk = 8;
  const std::size_t chunks = (m + kRowChunk - 1) / kRowChunk;
  parallel_for(chunks, [&](std::size_t chunk) {
    const std::size_t i0 = chunk * kRowChunk;
    gemm_rows(a, lda, b, ldb, c, ldc, k, n, i0, std::min(kRowChunk, m - i0), accumulate);
  });
}

namespace {

template <int Ib, int Jb>
inline void abt_tile(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                     std::size_t ldc, std::size_t p, std::size_t i0, std::size_t j0, bool accumulate) {
  double acc[Ib][Jb] = {};
  for (std::size_t kk = 0; kk < p; ++kk) {
    double bv[Jb];
    for (int u = 0; u < Jb; ++u) bv[u] = b[(j0 + u) * ldb + kk];
    for (int r = 0; r < Ib; ++r) {
      const double av = a[(i0 + r) * lda + kk];
      for (int u = 0; u < Jb; ++u) acc[r][u] += av * bv[u];
    }
  }
  for (int r = 0; r < Ib; ++r) {
    for (int u = 0; u < Jb; ++u) {
      double* dst = c + (i0 + r) * ldc + j0 + u;
      *dst = accumulate ? *dst + acc[r][u] : acc[r][u];
    }
  }
}

}  // namespace

void gemm_abt(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
              std::size_t ldc, std::size_t m, std::size_t p, std::size_t n, bool accumulate) {
  constexpr std::size_t kRowChunk = 4;
  const std::size_t chunks = (m + kRowChunk - 1) / kRowChunk;
  parallel_for(chunks, [&](std::size_t chunk) {
    const std::size_t i0 = chunk * kRowChunk;
    const std::size_t rows = std::min(kRowChunk, m - i0);
    std::size_t j = 0;
    if (rows == 4) {
      for (; j + 8 <= n; j += 8) abt_tile<4, 8>(a, lda, b, ldb, c, ldc, p, i0, j, accumulate);
      for (; j + 2 <= n; j += 2) abt_tile<4, 2>(a, lda, b, ldb, c, ldc, p, i0, j, accumulate);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const double* arow = a + (i0 + r) * lda;
      double* crow = c + (i0 + r) * ldc;
      for (std::size_t jj = j; jj < n; ++jj) {
        const double* brow = b + jj * ldb;
        double s = 0.0;
        for (std::size_t kk = 0; kk < p; ++kk) s += arow[kk] * brow[kk];
        crow[jj] = accumulate ? crow[jj] + s : s;
      }
    }
  });
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  detail::gemm_rowmajor(a.data(), k, b.data(), n, out.data(), n, m, k, n, false);
  return out;
}

// --- elementwise ------------------------------------------------------------

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* name) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.is_scalar()) {
    const double bv = b[0];
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.is_scalar()) {
    const double av = a[0];
    Tensor out(b.shape());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  throw ShapeError(std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, [](double x, double y) { return x + y; }, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, [](double x, double y) { return x - y; }, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return zip(a, b, [](double x, double y) { return x * y; }, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return zip(a, b, [](double x, double y) { return x / y; }, "div"); }

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// --- reductions -------------------------------------------------------------

double sum_all(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

Tensor reduce_all(ReduceOp op, const Tensor& a) {
  switch (op) {
    case ReduceOp::Sum:
      return Tensor::scalar(sum_all(a));
    case ReduceOp::Mean:
      return Tensor::scalar(sum_all(a) / static_cast<double>(a.size()));
    case ReduceOp::Max: {
      double m = a[0];
      for (std::size_t i = 1; i < a.size(); ++i) m = std::max(m, a[i]);
      return Tensor::scalar(m);
    }
  }
  throw ValueError("unknown reduce op");
}

Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw AxisError("reduce requires at least one axis");
  std::vector<bool> reduced(a.rank(), false);
  for (std::size_t ax : axes) {
    if (ax >= a.rank()) {
      throw AxisError("invalid axis " + std::to_string(ax) + " for rank " + std::to_string(a.rank()));
    }
    if (reduced[ax]) throw AxisError("duplicate axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  if (axes.size() == a.rank()) return reduce_all(op, a);

  Shape out_shape;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (!reduced[d]) out_shape.push_back(a.extent(d));
  }
  // Strides of the input, and the output offset contribution of each kept axis.
  std::vector<std::size_t> stride(a.rank(), 1);
  for (std::size_t d = a.rank(); d-- > 1;) stride[d - 1] = stride[d] * a.extent(d);
  std::vector<std::size_t> out_stride_for_axis(a.rank(), 0);
  {
    std::size_t acc = 1;
    for (std::size_t d = a.rank(); d-- > 0;) {
      if (!reduced[d]) {
        out_stride_for_axis[d] = acc;
        acc *= a.extent(d);
      }
    }
  }
  const double init = (op == ReduceOp::Max) ? -std::numeric_limits<double>::infinity() : 0.0;
  Tensor out = Tensor::full(out_shape, init);
  std::vector<std::size_t> idx(a.rank(), 0);
  // Row-major traversal keeps the accumulation order fixed.
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t d = 0; d < a.rank(); ++d) {
      const std::size_t id = rem / stride[d];
      rem %= stride[d];
      if (!reduced[d]) off += id * out_stride_for_axis[d];
    }
    if (op == ReduceOp::Max) {
      out[off] = std::max(out[off], a[flat]);
    } else {
      out[off] += a[flat];
    }
  }
  if (op == ReduceOp::Mean) {
    std::size_t count = 1;
    for (std::size_t d = 0; d < a.rank(); ++d) {
      if (reduced[d]) count *= a.extent(d);
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= static_cast<double>(count);
  }
  return out;
}

// --- layout -----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  return Tensor(std::move(new_shape), a.vec());
}

Tensor chw_to_tokens(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("chw_to_tokens expects rank 3, got " + shape_str(a.shape()));
  const std::size_t c = a.extent(0), h = a.extent(1), w = a.extent(2);
  Tensor out({h * w, c});
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = src + ch * h * w;
    for (std::size_t t = 0; t < h * w; ++t) dst[t * c + ch] = plane[t];
  }
  return out;
}

Tensor tokens_to_chw(const Tensor& a, std::size_t channels, std::size_t h, std::size_t w) {
  if (a.rank() != 2 || a.extent(0) != h * w || a.extent(1) != channels) {
    throw ShapeError("tokens_to_chw expects [" + std::to_string(h * w) + "x" + std::to_string(channels) +
                     "], got " + shape_str(a.shape()));
  }
  Tensor out({channels, h, w});
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t ch = 0; ch < channels; ++ch) {
    double* plane = dst + ch * h * w;
    for (std::size_t t = 0; t < h * w; ++t) plane[t] = src[t * channels + ch];
  }
  return out;
}

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  if (perm.size() != a.rank()) {
    throw ShapeError("permutation rank " + std::to_string(perm.size()) + " does not match tensor rank " +
                     std::to_string(a.rank()));
  }
  std::vector<bool> seen(a.rank(), false);
  for (std::size_t p : perm) {
    if (p >= a.rank() || seen[p]) throw AxisError("invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(a.rank());
  for (std::size_t d = 0; d < a.rank(); ++d) out_shape[d] = a.extent(perm[d]);
  Tensor out(out_shape);
  if (a.rank() == 0) {
    out[0] = a[0];
    return out;
  }
  std::vector<std::size_t> in_stride(a.rank(), 1);
  for (std::size_t d = a.rank(); d-- > 1;) in_stride[d - 1] = in_stride[d] * a.extent(d);
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < a.rank(); ++d) src += idx[d] * in_stride[perm[d]];
    out[flat] = a[src];
    for (std::size_t d = a.rank(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("2-D transpose expects rank 2, got " + shape_str(a.shape()));
  return transpose(a, {1, 0});
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank()) throw AxisError("narrow: invalid axis " + std::to_string(axis));
  if (len == 0 || start + len > a.extent(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") exceeds extent " + std::to_string(a.extent(axis)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor out(out_shape);
  const std::size_t ext = a.extent(axis);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = a.data() + (o * ext + start) * inner;
    double* dst = out.data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("concat requires at least one tensor");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) throw AxisError("concat: invalid axis " + std::to_string(axis));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < first.rank(); ++d) {
      if (d != axis && p.extent(d) != first.extent(d)) {
        throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(first.shape()));
      }
    }
    total += p.extent(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first.extent(d);
  for (std::size_t d = axis + 1; d < first.rank(); ++d) inner *= first.extent(d);
  Shape out_shape = first.shape();
  out_shape[axis] = total;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    double* dst = out.data() + o * total * inner;
    for (const Tensor& p : parts) {
      const std::size_t block = p.extent(axis) * inner;
      const double* src = p.data() + o * block;
      std::copy(src, src + block, dst);
      dst += block;
    }
  }
  return out;
}

// --- rng --------------------------------------------------------------------

namespace {
constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t Rng::next_u64() {
  state_ += kSplitMixGamma;
  return mix64(state_);
}

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw ValueError("uniform_int requires n > 0");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::normal(double mean, double std_dev) {
  if (std_dev < 0.0) throw ValueError("normal requires std >= 0");
  if (std_dev == 0.0) return mean;
  if (have_spare_) {
    have_spare_ = false;
    return mean + std_dev * spare_;
  }
  // Box-Muller; u clamped away from 0 so log stays finite.
  double u = uniform();
  if (u <= 0.0) u = 0x1.0p-53;
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double two_pi_v = 2.0 * 3.14159265358979323846 * v;
  spare_ = r * std::sin(two_pi_v);
  have_spare_ = true;
  return mean + std_dev * r * std::cos(two_pi_v);
}

Tensor Rng::normal_tensor(const Shape& shape, double mean, double std_dev) {
  if (std_dev < 0.0) throw ValueError("normal requires std >= 0");
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal(mean, std_dev);
  return t;
}

Rng Rng::fork(std::uint64_t label) const {
  return Rng(mix64(state_ ^ mix64(label + 0x632BE59BD9B4E019ull)));
}

std::uint64_t Rng::u64_at(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed + (index + 1) * kSplitMixGamma);
}

double Rng::uniform_at(std::uint64_t seed, std::uint64_t index) {
  return static_cast<double>(u64_at(seed, index) >> 11) * 0x1.0p-53;
}

}  // namespace tttseg
