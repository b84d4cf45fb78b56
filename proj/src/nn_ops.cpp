#include "tttseg/nn_ops.hpp"

#include <algorithm>
#include <cmath>

#include "tttseg/parallel.hpp"

namespace tttseg {

using detail::accum;
using detail::make_op;

namespace {

// Output range [lo, hi) such that 0 <= o*stride + k - pad < limit.
void valid_range(long limit, long stride, long k, long pad, long out_extent, long& lo, long& hi) {
  const long lo_num = pad - k;
  lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
  const long hi_num = limit - 1 + pad - k;
  hi = hi_num < 0 ? 0 : hi_num / stride + 1;
  lo = std::max(0L, lo);
  hi = std::min(out_extent, hi);
  if (hi < lo) hi = lo;
}

void check_conv_args(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph, int pw) {
  if (x.rank() != 4) throw ShapeError("conv input must be [NxCxHxW], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv weight must be [outCxinCxkhxkw], got " + shape_str(w.shape()));
  if (sh < 1 || sw < 1) throw ValueError("conv stride must be >= 1");
  if (ph < 0 || pw < 0) throw ValueError("conv padding must be >= 0");
  if (bias != nullptr && bias->rank() != 1) {
    throw ShapeError("conv bias must be rank 1, got " + shape_str(bias->shape()));
  }
}

}  // namespace

namespace {

struct ConvGeom {
  std::size_t n, ic, h, w, oc, kh, kw, oh, ow;
  int sh, sw, ph, pw;
  std::size_t patch() const { return ic * kh * kw; }      // im2col rows
  std::size_t in_plane() const { return ic * h * w; }
  std::size_t out_plane() const { return oc * oh * ow; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0;
  }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int sh, int sw, int ph, int pw) {
  const std::size_t h = x.extent(2), wd = x.extent(3);
  const std::size_t kh = w.extent(2), kw = w.extent(3);
  const long oh = (static_cast<long>(h) + 2 * ph - static_cast<long>(kh)) / sh + 1;
  const long ow = (static_cast<long>(wd) + 2 * pw - static_cast<long>(kw)) / sw + 1;
  if (static_cast<long>(h) + 2 * ph < static_cast<long>(kh) ||
      static_cast<long>(wd) + 2 * pw < static_cast<long>(kw) || oh < 1 || ow < 1) {
    throw ShapeError("conv output would be empty for input " + shape_str(x.shape()) + " and kernel " +
                     shape_str(w.shape()));
  }
  return ConvGeom{x.extent(0), x.extent(1), h,  wd, w.extent(0), kh, kw, static_cast<std::size_t>(oh),
                  static_cast<std::size_t>(ow), sh, sw,          ph, pw};
}

// Output-row tiling keeps the im2col buffer near a fixed byte budget.
std::size_t conv_tile_rows(const ConvGeom& g) {
  const std::size_t budget = 120'000;  // doubles; tiles sized to stay cache-resident
  const std::size_t per_row = g.patch() * g.ow;
  return std::max<std::size_t>(1, std::min(g.oh, per_row > 0 ? budget / per_row : g.oh));
}

// col[k][p] for output rows [row_lo, row_hi): k runs over (ic, kh, kw), so a
// GEMM over k accumulates in exactly that order per output pixel.
void im2col_tile(const double* xplane, const ConvGeom& g, std::size_t row_lo, std::size_t row_hi,
                 double* col) {
  const std::size_t tile_p = (row_hi - row_lo) * g.ow;
  std::size_t krow = 0;
  for (std::size_t ici = 0; ici < g.ic; ++ici) {
    const double* cplane = xplane + ici * g.h * g.w;
    for (std::size_t khi = 0; khi < g.kh; ++khi) {
      for (std::size_t kwi = 0; kwi < g.kw; ++kwi, ++krow) {
        double* dst = col + krow * tile_p;
        for (std::size_t ohi = row_lo; ohi < row_hi; ++ohi) {
          double* drow = dst + (ohi - row_lo) * g.ow;
          const long ih = static_cast<long>(ohi) * g.sh + static_cast<long>(khi) - g.ph;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(drow, drow + g.ow, 0.0);
            continue;
          }
          const double* xrow = cplane + static_cast<std::size_t>(ih) * g.w;
          const long off = static_cast<long>(kwi) - g.pw;
          if (g.sw == 1) {
            long lo, hi;
            valid_range(static_cast<long>(g.w), 1, static_cast<long>(kwi), g.pw,
                        static_cast<long>(g.ow), lo, hi);
            std::fill(drow, drow + lo, 0.0);
            std::copy(xrow + lo + off, xrow + hi + off, drow + lo);
            std::fill(drow + hi, drow + g.ow, 0.0);
          } else {
            for (std::size_t owi = 0; owi < g.ow; ++owi) {
              const long iw = static_cast<long>(owi) * g.sw + off;
              drow[owi] = (iw >= 0 && iw < static_cast<long>(g.w)) ? xrow[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adds col[k][p] back into the input plane (adjoint of im2col_tile).
void col2im_tile_add(const double* col, const ConvGeom& g, std::size_t row_lo, std::size_t row_hi,
                     double* xplane) {
  const std::size_t tile_p = (row_hi - row_lo) * g.ow;
  std::size_t krow = 0;
  for (std::size_t ici = 0; ici < g.ic; ++ici) {
    double* cplane = xplane + ici * g.h * g.w;
    for (std::size_t khi = 0; khi < g.kh; ++khi) {
      for (std::size_t kwi = 0; kwi < g.kw; ++kwi, ++krow) {
        const double* src = col + krow * tile_p;
        for (std::size_t ohi = row_lo; ohi < row_hi; ++ohi) {
          const double* srow = src + (ohi - row_lo) * g.ow;
          const long ih = static_cast<long>(ohi) * g.sh + static_cast<long>(khi) - g.ph;
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          double* xrow = cplane + static_cast<std::size_t>(ih) * g.w;
          const long off = static_cast<long>(kwi) - g.pw;
          for (std::size_t owi = 0; owi < g.ow; ++owi) {
            const long iw = static_cast<long>(owi) * g.sw + off;
            if (iw >= 0 && iw < static_cast<long>(g.w)) xrow[iw] += srow[owi];
          }
        }
      }
    }
  }
}

std::vector<double>& conv_scratch() {
  thread_local std::vector<double> buf;
  return buf;
}

}  // namespace

Tensor conv2d_raw(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph, int pw) {
  check_conv_args(x, w, bias, sh, sw, ph, pw);
  if (w.extent(1) != x.extent(1)) {
    throw ShapeError("conv channel mismatch: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (bias != nullptr && bias->extent(0) != w.extent(0)) {
    throw ShapeError("conv bias length " + shape_str(bias->shape()) + " does not match outC " +
                     std::to_string(w.extent(0)));
  }
  const ConvGeom g = conv_geometry(x, w, sh, sw, ph, pw);
  Tensor y({g.n, g.oc, g.oh, g.ow});
  double* yp = y.data();
  const std::size_t out_p = g.oh * g.ow;
  if (bias != nullptr) {
    for (std::size_t ni = 0; ni < g.n; ++ni) {
      for (std::size_t oci = 0; oci < g.oc; ++oci) {
        double* row = yp + (ni * g.oc + oci) * out_p;
        std::fill(row, row + out_p, (*bias)[oci]);
      }
    }
  }
  const std::size_t tile = conv_tile_rows(g);
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    const double* xplane = x.data() + ni * g.in_plane();
    double* yplane = yp + ni * g.out_plane();
    if (g.pointwise()) {
      // im2col is the identity here; feed the input plane directly.
      detail::gemm_rowmajor(w.data(), g.patch(), xplane, out_p, yplane, out_p, g.oc, g.patch(), out_p,
                            bias != nullptr);
      continue;
    }
    for (std::size_t row_lo = 0; row_lo < g.oh; row_lo += tile) {
      const std::size_t row_hi = std::min(g.oh, row_lo + tile);
      const std::size_t tile_p = (row_hi - row_lo) * g.ow;
      auto& col = conv_scratch();
      col.resize(g.patch() * tile_p);
      im2col_tile(xplane, g, row_lo, row_hi, col.data());
      detail::gemm_rowmajor(w.data(), g.patch(), col.data(), tile_p, yplane + row_lo * g.ow, out_p, g.oc,
                            g.patch(), tile_p, bias != nullptr);
    }
  }
  return y;
}

Tensor conv2d_input_grad_raw(const Tensor& gy, const Tensor& w, std::size_t h, std::size_t w_in, int sh,
                             int sw, int ph, int pw) {
  const std::size_t oc = gy.extent(1);
  if (w.extent(0) != oc) {
    throw ShapeError("channel mismatch: grad " + shape_str(gy.shape()) + " vs weight " + shape_str(w.shape()));
  }
  ConvGeom g;
  g.n = gy.extent(0);
  g.ic = w.extent(1);
  g.h = h;
  g.w = w_in;
  g.oc = oc;
  g.kh = w.extent(2);
  g.kw = w.extent(3);
  g.oh = gy.extent(2);
  g.ow = gy.extent(3);
  g.sh = sh;
  g.sw = sw;
  g.ph = ph;
  g.pw = pw;

  // w transposed to [K x OC] so gcol = w^T gy accumulates over oc ascending.
  std::vector<double> wt(g.patch() * g.oc);
  for (std::size_t oci = 0; oci < g.oc; ++oci) {
    for (std::size_t kk = 0; kk < g.patch(); ++kk) wt[kk * g.oc + oci] = w[oci * g.patch() + kk];
  }

  Tensor gx({g.n, g.ic, g.h, g.w});
  const std::size_t out_p = g.oh * g.ow;
  const std::size_t tile = conv_tile_rows(g);
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    const double* gplane = gy.data() + ni * g.out_plane();
    double* xplane = gx.data() + ni * g.in_plane();
    if (g.pointwise()) {
      detail::gemm_rowmajor(wt.data(), g.oc, gplane, out_p, xplane, out_p, g.patch(), g.oc, out_p, false);
      continue;
    }
    for (std::size_t row_lo = 0; row_lo < g.oh; row_lo += tile) {
      const std::size_t row_hi = std::min(g.oh, row_lo + tile);
      const std::size_t tile_p = (row_hi - row_lo) * g.ow;
      auto& col = conv_scratch();
      col.resize(g.patch() * tile_p);
      detail::gemm_rowmajor(wt.data(), g.oc, gplane + row_lo * g.ow, out_p, col.data(), tile_p, g.patch(),
                            g.oc, tile_p, false);
      col2im_tile_add(col.data(), g, row_lo, row_hi, xplane);
    }
  }
  return gx;
}

Tensor conv2d_weight_grad_raw(const Tensor& x, const Tensor& gy, std::size_t kh, std::size_t kw, int sh,
                              int sw, int ph, int pw) {
  ConvGeom g;
  g.n = x.extent(0);
  g.ic = x.extent(1);
  g.h = x.extent(2);
  g.w = x.extent(3);
  g.oc = gy.extent(1);
  g.kh = kh;
  g.kw = kw;
  g.oh = gy.extent(2);
  g.ow = gy.extent(3);
  g.sh = sh;
  g.sw = sw;
  g.ph = ph;
  g.pw = pw;

  Tensor gw({g.oc, g.ic, g.kh, g.kw});
  const std::size_t out_p = g.oh * g.ow;
  const std::size_t tile = conv_tile_rows(g);
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    const double* xplane = x.data() + ni * g.in_plane();
    const double* gplane = gy.data() + ni * g.out_plane();
    if (g.pointwise()) {
      detail::gemm_abt(gplane, out_p, xplane, out_p, gw.data(), g.patch(), g.oc, out_p, g.patch(), true);
      continue;
    }
    for (std::size_t row_lo = 0; row_lo < g.oh; row_lo += tile) {
      const std::size_t row_hi = std::min(g.oh, row_lo + tile);
      const std::size_t tile_p = (row_hi - row_lo) * g.ow;
      auto& col = conv_scratch();
      col.resize(g.patch() * tile_p);
      im2col_tile(xplane, g, row_lo, row_hi, col.data());
      detail::gemm_abt(gplane + row_lo * g.ow, out_p, col.data(), tile_p, gw.data(), g.patch(), g.oc,
                       tile_p, g.patch(), true);
    }
  }
  return gw;
}

Tensor conv_transpose2d_raw(const Tensor& x, const Tensor& w, const Tensor* bias, int sh, int sw, int ph,
                            int pw) {
  check_conv_args(x, w, bias, sh, sw, ph, pw);
  const std::size_t oc = w.extent(0), ic = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (x.extent(1) != oc) {
    throw ShapeError("conv_transpose channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (bias != nullptr && bias->extent(0) != ic) {
    throw ShapeError("conv_transpose bias length " + shape_str(bias->shape()) + " does not match outC " +
                     std::to_string(ic));
  }
  const long oh = (static_cast<long>(x.extent(2)) - 1) * sh - 2 * ph + static_cast<long>(kh);
  const long ow = (static_cast<long>(x.extent(3)) - 1) * sw - 2 * pw + static_cast<long>(kw);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv_transpose output would be empty for input " + shape_str(x.shape()) + " and kernel " +
                     shape_str(w.shape()));
  }
  Tensor y = conv2d_input_grad_raw(x, w, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), sh, sw, ph, pw);
  if (bias != nullptr) {
    double* yp = y.data();
    const std::size_t plane = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);
    for (std::size_t ni = 0; ni < x.extent(0); ++ni) {
      for (std::size_t c = 0; c < ic; ++c) {
        const double b = (*bias)[c];
        double* row = yp + (ni * ic + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += b;
      }
    }
  }
  return y;
}

namespace {

Tensor channel_sum(const Tensor& g) {
  // Sum over (n, h, w) for each channel of an [N x C x H x W] tensor.
  const std::size_t n = g.extent(0), c = g.extent(1), plane = g.extent(2) * g.extent(3);
  Tensor out({c});
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* row = g.data() + (ni * c + ci) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += row[i];
      out[ci] += acc;
    }
  }
  return out;
}

}  // namespace

Value conv2d(const Value& x, const Value& w, const Value& bias, int sh, int sw, int ph, int pw) {
  const Tensor* bp = bias.defined() ? &bias.val() : nullptr;
  Tensor out = conv2d_raw(x.val(), w.val(), bp, sh, sw, ph, pw);
  std::vector<Value> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [sh, sw, ph, pw](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    accum(*n.parents[0], conv2d_input_grad_raw(n.grad, wv, xv.extent(2), xv.extent(3), sh, sw, ph, pw));
    accum(*n.parents[1], conv2d_weight_grad_raw(xv, n.grad, wv.extent(2), wv.extent(3), sh, sw, ph, pw));
    if (n.parents.size() > 2) accum(*n.parents[2], channel_sum(n.grad));
  });
}

Value conv_transpose2d(const Value& x, const Value& w, const Value& bias, int sh, int sw, int ph, int pw) {
  const Tensor* bp = bias.defined() ? &bias.val() : nullptr;
  Tensor out = conv_transpose2d_raw(x.val(), w.val(), bp, sh, sw, ph, pw);
  std::vector<Value> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [sh, sw, ph, pw](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    accum(*n.parents[0], conv2d_raw(n.grad, wv, nullptr, sh, sw, ph, pw));
    accum(*n.parents[1], conv2d_weight_grad_raw(n.grad, xv, wv.extent(2), wv.extent(3), sh, sw, ph, pw));
    if (n.parents.size() > 2) accum(*n.parents[2], channel_sum(n.grad));
  });
}

// --- normalization ------------------------------------------------------------

namespace {

struct NormStats {
  Tensor normalized;  // xhat, same shape as x
  Tensor inv_std;     // one per group
};

// Standardizes contiguous groups of length m; x is viewed as groups x m.
NormStats standardize_groups(const Tensor& x, std::size_t m, double eps) {
  NormStats st{Tensor(x.shape()), Tensor({x.size() / m})};
  const std::size_t groups = x.size() / m;
  for (std::size_t g = 0; g < groups; ++g) {
    const double* src = x.data() + g * m;
    double* dst = st.normalized.data() + g * m;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += src[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);  // biased
    const double inv = 1.0 / std::sqrt(var + eps);
    st.inv_std[g] = inv;
    for (std::size_t i = 0; i < m; ++i) dst[i] = (src[i] - mean) * inv;
  }
  return st;
}

// dL/dx for a standardized group: inv_std * (g - mean(g) - xhat * mean(g*xhat)).
void standardize_backward_group(const double* g, const double* xhat, double inv_std, double gain,
                                std::size_t m, double* dx) {
  double gsum = 0.0, gxsum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    gsum += g[i];
    gxsum += g[i] * xhat[i];
  }
  const double gmean = gsum / static_cast<double>(m);
  const double gxmean = gxsum / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) dx[i] = gain * inv_std * (g[i] - gmean - xhat[i] * gxmean);
}

}  // namespace

Value instance_norm(const Value& x, const Value& gain, const Value& offset, double eps) {
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw ShapeError("instance_norm expects [NxCxHxW], got " + shape_str(xv.shape()));
  const std::size_t n = xv.extent(0), c = xv.extent(1), m = xv.extent(2) * xv.extent(3);
  if (gain.val().shape() != Shape{c} || offset.val().shape() != Shape{c}) {
    throw ShapeError("instance_norm gain/offset must be [C]");
  }
  if (eps <= 0.0) throw ValueError("norm epsilon must be positive");
  NormStats st = standardize_groups(xv, m, eps);
  Tensor out(xv.shape());
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double ga = gain.val()[ci], of = offset.val()[ci];
      const double* src = st.normalized.data() + (ni * c + ci) * m;
      double* dst = out.data() + (ni * c + ci) * m;
      for (std::size_t i = 0; i < m; ++i) dst[i] = ga * src[i] + of;
    }
  }
  return make_op(std::move(out), {x, gain, offset},
                 [st = std::move(st), n, c, m](Node& nd) {
                   const Tensor& gainv = nd.parents[1]->value;
                   Tensor dx(nd.parents[0]->value.shape());
                   Tensor dgain({c});
                   Tensor doffset({c});
                   for (std::size_t ni = 0; ni < n; ++ni) {
                     for (std::size_t ci = 0; ci < c; ++ci) {
                       const std::size_t g = ni * c + ci;
                       const double* gr = nd.grad.data() + g * m;
                       const double* xh = st.normalized.data() + g * m;
                       standardize_backward_group(gr, xh, st.inv_std[g], gainv[ci], m, dx.data() + g * m);
                       double dg = 0.0, db = 0.0;
                       for (std::size_t i = 0; i < m; ++i) {
                         dg += gr[i] * xh[i];
                         db += gr[i];
                       }
                       dgain[ci] += dg;
                       doffset[ci] += db;
                     }
                   }
                   accum(*nd.parents[0], dx);
                   accum(*nd.parents[1], dgain);
                   accum(*nd.parents[2], doffset);
                 });
}

Value layer_norm(const Value& x, const Value& gain, const Value& offset, double eps) {
  const Tensor& xv = x.val();
  if (xv.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const std::size_t d = xv.extent(xv.rank() - 1);
  if (gain.val().shape() != Shape{d} || offset.val().shape() != Shape{d}) {
    throw ShapeError("layer_norm gain/offset must be [D]");
  }
  if (eps <= 0.0) throw ValueError("norm epsilon must be positive");
  const std::size_t rows = xv.size() / d;
  NormStats st = standardize_groups(xv, d, eps);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = st.normalized.data() + r * d;
    double* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = gain.val()[j] * src[j] + offset.val()[j];
  }
  return make_op(std::move(out), {x, gain, offset},
                 [st = std::move(st), rows, d](Node& nd) {
                   const Tensor& gainv = nd.parents[1]->value;
                   Tensor dx(nd.parents[0]->value.shape());
                   Tensor dgain({d});
                   Tensor doffset({d});
                   std::vector<double> grow(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gr = nd.grad.data() + r * d;
                     const double* xh = st.normalized.data() + r * d;
                     // Two pieces: gain-scaled standardization backward, plus
                     // per-feature gain/offset sums.
                     double gsum = 0.0, gxsum = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       grow[j] = gr[j] * gainv[j];
                       gsum += grow[j];
                       gxsum += grow[j] * xh[j];
                       dgain[j] += gr[j] * xh[j];
                       doffset[j] += gr[j];
                     }
                     const double gmean = gsum / static_cast<double>(d);
                     const double gxmean = gxsum / static_cast<double>(d);
                     double* dst = dx.data() + r * d;
                     for (std::size_t j = 0; j < d; ++j) {
                       dst[j] = st.inv_std[r] * (grow[j] - gmean - xh[j] * gxmean);
                     }
                   }
                   accum(*nd.parents[0], dx);
                   accum(*nd.parents[1], dgain);
                   accum(*nd.parents[2], doffset);
                 });
}

// --- activations ----------------------------------------------------------------

Value leaky_relu(const Value& x, double slope) {
  const Tensor& xv = x.val();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  return make_op(std::move(out), {x}, [slope](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    Tensor g(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] = n.grad[i] * (xv[i] > 0.0 ? 1.0 : slope);
    accum(*n.parents[0], g);
  });
}

namespace {
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

constexpr double kGeluC1 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC2 = 0.044715;

inline double gelu_scalar(double v) {
  return 0.5 * v * (1.0 + std::tanh(kGeluC1 * (v + kGeluC2 * v * v * v)));
}

inline double gelu_grad_scalar(double v) {
  const double inner = kGeluC1 * (v + kGeluC2 * v * v * v);
  const double t = std::tanh(inner);
  const double dinner = kGeluC1 * (1.0 + 3.0 * kGeluC2 * v * v);
  return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
}
}  // namespace

Value silu(const Value& x) {
  const Tensor& xv = x.val();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  return make_op(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    Tensor g(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double s = sigmoid(xv[i]);
      g[i] = n.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
    accum(*n.parents[0], g);
  });
}

Value gelu(const Value& x) {
  const Tensor& xv = x.val();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_scalar(xv[i]);
  return make_op(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    Tensor g(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] = n.grad[i] * gelu_grad_scalar(xv[i]);
    accum(*n.parents[0], g);
  });
}

Value gelu_derivative_expr(const Value& x) {
  // d/dx gelu(x) = 0.5 (1 + t) + 0.5 x (1 - t^2) c1 (1 + 3 c2 x^2),
  // t = tanh(c1 (x + c2 x^3)); composed from primitives so it stays on tape.
  Value x2 = mul(x, x);
  Value inner = scale(add(x, scale(mul(x2, x), kGeluC2)), kGeluC1);
  Value t = tanh(inner);
  Value one_minus_t2 = add_scalar(neg(mul(t, t)), 1.0);
  Value dinner = scale(add_scalar(scale(x2, 3.0 * kGeluC2), 1.0), kGeluC1);
  return add(scale(add_scalar(t, 1.0), 0.5), scale(mul(mul(x, one_minus_t2), dinner), 0.5));
}

Value activation(Activation kind, const Value& x) {
  switch (kind) {
    case Activation::Identity:
      return x;
    case Activation::LeakyRelu:
      return leaky_relu(x);
    case Activation::Silu:
      return silu(x);
    case Activation::Gelu:
      return gelu(x);
    case Activation::Tanh:
      return tanh(x);
  }
  throw ValueError("unknown activation");
}

Value softmax(const Value& x, std::size_t axis) {
  const Tensor& xv = x.val();
  if (axis >= xv.rank()) throw AxisError("softmax: invalid axis " + std::to_string(axis));
  const std::size_t ext = xv.extent(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= xv.extent(d);
  for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.extent(d);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * ext * inner + i;
      double m = xv[base];
      for (std::size_t j = 1; j < ext; ++j) m = std::max(m, xv[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < ext; ++j) {
        const double e = std::exp(xv[base + j * inner] - m);
        out[base + j * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < ext; ++j) out[base + j * inner] *= inv;
    }
  }
  Tensor saved = out;
  return make_op(std::move(out), {x}, [saved = std::move(saved), outer, inner, ext](Node& n) {
    Tensor g(saved.shape());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * ext * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < ext; ++j) dot += n.grad[base + j * inner] * saved[base + j * inner];
        for (std::size_t j = 0; j < ext; ++j) {
          g[base + j * inner] = saved[base + j * inner] * (n.grad[base + j * inner] - dot);
        }
      }
    }
    accum(*n.parents[0], g);
  });
}

// --- token-space ops --------------------------------------------------------------

Value linear_tokens(const Value& x, const Value& w, const Value& bias) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.extent(1) != wv.extent(1)) {
    throw ShapeError("linear_tokens shapes " + shape_str(xv.shape()) + " and " + shape_str(wv.shape()) +
                     " do not conform");
  }
  const std::size_t t = xv.extent(0), din = xv.extent(1), dout = wv.extent(0);
  if (bias.defined() && bias.val().shape() != Shape{dout}) {
    throw ShapeError("linear_tokens bias must be [Dout]");
  }
  Tensor out({t, dout});
  for (std::size_t r = 0; r < t; ++r) {
    const double* xr = xv.data() + r * din;
    double* yr = out.data() + r * dout;
    if (bias.defined()) {
      for (std::size_t j = 0; j < dout; ++j) yr[j] = bias.val()[j];
    }
    for (std::size_t j = 0; j < dout; ++j) {
      const double* wr = wv.data() + j * din;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < din; ++kk) acc += xr[kk] * wr[kk];
      yr[j] += acc;
    }
  }
  std::vector<Value> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [t, din, dout](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    accum(*n.parents[0], matmul(n.grad, wv));
    accum(*n.parents[1], matmul(transpose(n.grad), xv));
    if (n.parents.size() > 2) {
      Tensor gb({dout});
      for (std::size_t r = 0; r < t; ++r) {
        const double* gr = n.grad.data() + r * dout;
        for (std::size_t j = 0; j < dout; ++j) gb[j] += gr[j];
      }
      accum(*n.parents[2], gb);
    }
    (void)din;
  });
}

Value causal_dwconv(const Value& x, const Value& w) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.extent(1) != wv.extent(0)) {
    throw ShapeError("causal_dwconv shapes " + shape_str(xv.shape()) + " and " + shape_str(wv.shape()) +
                     " do not conform");
  }
  const std::size_t t = xv.extent(0), d = xv.extent(1), k = wv.extent(1);
  Tensor out({t, d});
  for (std::size_t ti = 0; ti < t; ++ti) {
    double* yr = out.data() + ti * d;
    for (std::size_t j = 0; j < k; ++j) {
      const long src = static_cast<long>(ti) - static_cast<long>(k - 1) + static_cast<long>(j);
      if (src < 0) continue;
      const double* xr = xv.data() + static_cast<std::size_t>(src) * d;
      for (std::size_t di = 0; di < d; ++di) yr[di] += wv[di * k + j] * xr[di];
    }
  }
  return make_op(std::move(out), {x, w}, [t, d, k](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    Tensor gx({t, d});
    Tensor gw({d, k});
    for (std::size_t ti = 0; ti < t; ++ti) {
      const double* gr = n.grad.data() + ti * d;
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(ti) - static_cast<long>(k - 1) + static_cast<long>(j);
        if (src < 0) continue;
        const double* xr = xv.data() + static_cast<std::size_t>(src) * d;
        double* gxr = gx.data() + static_cast<std::size_t>(src) * d;
        for (std::size_t di = 0; di < d; ++di) {
          gxr[di] += wv[di * k + j] * gr[di];
          gw[di * k + j] += gr[di] * xr[di];
        }
      }
    }
    accum(*n.parents[0], gx);
    accum(*n.parents[1], gw);
  });
}

// --- plain-tensor conveniences ------------------------------------------------------

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  return conv2d_raw(x, p.weight, p.bias ? &*p.bias : nullptr, p.stride_h, p.stride_w, p.pad_h, p.pad_w);
}

Tensor conv_transpose2d(const Tensor& x, const Conv2dParams& p) {
  return conv_transpose2d_raw(x, p.weight, p.bias ? &*p.bias : nullptr, p.stride_h, p.stride_w, p.pad_h, p.pad_w);
}

Tensor instance_norm(const Tensor& x, const NormParams& p) {
  NoGradGuard guard;
  return instance_norm(Value::constant(x), Value::constant(p.gain), Value::constant(p.offset), p.epsilon).val();
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
  NoGradGuard guard;
  return layer_norm(Value::constant(x), Value::constant(p.gain), Value::constant(p.offset), p.epsilon).val();
}

}  // namespace tttseg
