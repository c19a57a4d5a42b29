#pragma once

// Forward and adjoint kernels for the operator set. Everything here is a
// plain function on tensors; the tape in autodiff.hpp wires them together.
// Backward functions accumulate (+=) into their gradient outputs.

#include <condatlas/tensor.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace condatlas::kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline int conv_out_extent(int n, int stride) { return (n + stride - 1) / stride; }

inline Dims conv_out_dims(Dims d, int stride) {
  return {conv_out_extent(d.nx, stride), conv_out_extent(d.ny, stride), conv_out_extent(d.nz, stride)};
}

// ---------------------------------------------------------------------------
// conv3: zero "same" padding of (k-1)/2, stride 1 or 2.
// Weights are {Cout, Cin, k, k, k} with kernel axes ordered (kz, ky, kx).

namespace detail {

// Scratch space reused across calls; operators are single-threaded per thread.
inline AlignedBuffer& scratch_columns() {
  thread_local AlignedBuffer buf;
  return buf;
}

// Gathers input patches into a (Cin*k^3) x Nout matrix.
inline void im2col(const Tensor& x, int k, int stride, Dims od, AlignedBuffer& col) {
  const Dims d = x.dims();
  const int cin = x.channels();
  const int pad = (k - 1) / 2;
  const std::size_t nout = od.voxels();
  col.resize(static_cast<std::size_t>(cin) * k * k * k * nout);
  std::fill(col.begin(), col.end(), 0.0);
  std::size_t row = 0;
  for (int c = 0; c < cin; ++c) {
    const double* src = x.channel(c);
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx, ++row) {
          double* dst = col.data() + row * nout;
          for (int oz = 0; oz < od.nz; ++oz) {
            const int iz = oz * stride + kz - pad;
            if (iz < 0 || iz >= d.nz) continue;
            for (int oy = 0; oy < od.ny; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= d.ny) continue;
              const double* line = src + d.index(0, iy, iz);
              double* out = dst + od.index(0, oy, oz);
              if (stride == 1) {
                const int lo = std::max(0, pad - kx);
                const int hi = std::min(od.nx, d.nx + pad - kx);
                for (int ox = lo; ox < hi; ++ox) out[ox] = line[ox + kx - pad];
              } else {
                for (int ox = 0; ox < od.nx; ++ox) {
                  const int ix = ox * stride + kx - pad;
                  if (ix >= 0 && ix < d.nx) out[ox] = line[ix];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-adds a column matrix back onto the input grid (adjoint of im2col).
inline void col2im(const AlignedBuffer& col, int k, int stride, Dims od, Tensor& dx) {
  const Dims d = dx.dims();
  const int cin = dx.channels();
  const int pad = (k - 1) / 2;
  const std::size_t nout = od.voxels();
  std::size_t row = 0;
  for (int c = 0; c < cin; ++c) {
    double* dst = dx.channel(c);
    for (int kz = 0; kz < k; ++kz) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx, ++row) {
          const double* src = col.data() + row * nout;
          for (int oz = 0; oz < od.nz; ++oz) {
            const int iz = oz * stride + kz - pad;
            if (iz < 0 || iz >= d.nz) continue;
            for (int oy = 0; oy < od.ny; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= d.ny) continue;
              double* line = dst + d.index(0, iy, iz);
              const double* in = src + od.index(0, oy, oz);
              if (stride == 1) {
                const int lo = std::max(0, pad - kx);
                const int hi = std::min(od.nx, d.nx + pad - kx);
                for (int ox = lo; ox < hi; ++ox) line[ox + kx - pad] += in[ox];
              } else {
                for (int ox = 0; ox < od.nx; ++ox) {
                  const int ix = ox * stride + kx - pad;
                  if (ix >= 0 && ix < d.nx) line[ix] += in[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

inline void check_conv_args(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (!x.is_feature()) throw std::invalid_argument("conv3: input must be a feature map");
  const auto& ws = w.shape();
  if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0) {
    throw std::invalid_argument("conv3: weights must be {Cout, Cin, k, k, k} with odd k");
  }
  if (ws[1] != x.channels()) {
    throw std::invalid_argument("conv3: channel mismatch, input has " + std::to_string(x.channels()) +
                                " channels, weights expect " + std::to_string(ws[1]));
  }
  if (b.size() != static_cast<std::size_t>(ws[0])) throw std::invalid_argument("conv3: bias length mismatch");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3: stride must be 1 or 2");
}

// Stride-1 path without im2col. Inputs are zero-padded once; on the padded
// grid every kernel tap is a constant linear shift, so the convolution is a
// sum of k^3 small GEMMs over one contiguous index range. Outputs computed at
// padding positions are discarded.
struct ShiftPlan {
  Dims pd;
  int pad = 0;
  std::ptrdiff_t first = 0;  // padded index of output voxel (0,0,0)
  std::ptrdiff_t span = 0;   // length of the computed range
  std::vector<std::ptrdiff_t> offsets;
};

inline ShiftPlan make_shift_plan(Dims d, int k) {
  ShiftPlan p;
  p.pad = (k - 1) / 2;
  p.pd = {d.nx + 2 * p.pad, d.ny + 2 * p.pad, d.nz + 2 * p.pad};
  p.first = static_cast<std::ptrdiff_t>(p.pd.index(p.pad, p.pad, p.pad));
  p.span = static_cast<std::ptrdiff_t>(p.pd.index(d.nx - 1 + p.pad, d.ny - 1 + p.pad, d.nz - 1 + p.pad)) - p.first + 1;
  const auto sy = static_cast<std::ptrdiff_t>(p.pd.nx);
  const auto sz = sy * p.pd.ny;
  for (int kz = 0; kz < k; ++kz)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) p.offsets.push_back((kz - p.pad) * sz + (ky - p.pad) * sy + (kx - p.pad));
  return p;
}

// Copies channels of `src` (grid d) into the interior of a padded buffer.
inline void pad_into(const double* src, int channels, Dims d, const ShiftPlan& p, AlignedBuffer& dst) {
  const std::size_t np = p.pd.voxels();
  dst.assign(channels * np, 0.0);
  for (int c = 0; c < channels; ++c) {
    const double* s = src + c * d.voxels();
    double* t = dst.data() + c * np;
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        std::copy_n(s + d.index(0, y, z), d.nx, t + p.pd.index(p.pad, y + p.pad, z + p.pad));
  }
}

// Copies the interior of a padded buffer back to a plain grid (+= if accumulate).
inline void crop_from(const double* src, int channels, Dims d, const ShiftPlan& p, double* dst, bool accumulate) {
  const std::size_t np = p.pd.voxels();
  for (int c = 0; c < channels; ++c) {
    const double* s = src + c * np;
    double* t = dst + c * d.voxels();
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y) {
        const double* a = s + p.pd.index(p.pad, y + p.pad, z + p.pad);
        double* o = t + d.index(0, y, z);
        if (accumulate) {
          for (int x = 0; x < d.nx; ++x) o[x] += a[x];
        } else {
          std::copy_n(a, d.nx, o);
        }
      }
  }
}

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Per-tap weight blocks {k^3, Cout, Cin} from {Cout, Cin, k, k, k}.
inline std::vector<RowMat> tap_weights(const Tensor& w) {
  const int cout = w.shape()[0], cin = w.shape()[1];
  const int taps = w.shape()[2] * w.shape()[3] * w.shape()[4];
  std::vector<RowMat> out(taps, RowMat(cout, cin));
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i)
      for (int t = 0; t < taps; ++t) out[t](o, i) = w.data()[(static_cast<std::size_t>(o) * cin + i) * taps + t];
  return out;
}

inline AlignedBuffer& scratch_padded(int which) {
  thread_local AlignedBuffer bufs[3];
  return bufs[which];
}

inline Tensor conv3_shift_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int cout = w.shape()[0], cin = x.channels(), k = w.shape()[2];
  const Dims d = x.dims();
  const ShiftPlan p = make_shift_plan(d, k);
  const auto np = static_cast<Eigen::Index>(p.pd.voxels());
  auto& xp = scratch_padded(0);
  pad_into(x.data(), cin, d, p, xp);
  auto& yp = scratch_padded(1);
  yp.assign(static_cast<std::size_t>(cout) * np, 0.0);
  const auto taps = tap_weights(w);
  StridedMap ym(yp.data() + p.first, cout, p.span, Eigen::OuterStride<>(np));
  for (std::size_t t = 0; t < taps.size(); ++t) {
    ConstStridedMap xm(xp.data() + p.first + p.offsets[t], cin, p.span, Eigen::OuterStride<>(np));
    ym.noalias() += taps[t] * xm;
  }
  Tensor y = Tensor::feature(cout, d);
  crop_from(yp.data(), cout, d, p, y.data(), false);
  for (int c = 0; c < cout; ++c) {
    double* yc = y.channel(c);
    for (std::size_t i = 0; i < d.voxels(); ++i) yc[i] += b[c];
  }
  return y;
}

inline void conv3_shift_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw) {
  const int cout = w.shape()[0], cin = x.channels(), k = w.shape()[2];
  const Dims d = x.dims();
  const ShiftPlan p = make_shift_plan(d, k);
  const auto np = static_cast<Eigen::Index>(p.pd.voxels());
  auto& dyp = scratch_padded(1);
  pad_into(dy.data(), cout, d, p, dyp);
  ConstStridedMap dym(dyp.data() + p.first, cout, p.span, Eigen::OuterStride<>(np));
  const int ntaps = k * k * k;
  if (dw != nullptr) {
    auto& xp = scratch_padded(0);
    pad_into(x.data(), cin, d, p, xp);
    RowMat g(cout, cin);
    for (int t = 0; t < ntaps; ++t) {
      ConstStridedMap xm(xp.data() + p.first + p.offsets[t], cin, p.span, Eigen::OuterStride<>(np));
      g.noalias() = dym * xm.transpose();
      for (int o = 0; o < cout; ++o)
        for (int i = 0; i < cin; ++i) dw->data()[(static_cast<std::size_t>(o) * cin + i) * ntaps + t] += g(o, i);
    }
  }
  if (dx != nullptr) {
    const auto taps = tap_weights(w);
    auto& dxp = scratch_padded(2);
    dxp.assign(static_cast<std::size_t>(cin) * np, 0.0);
    for (int t = 0; t < ntaps; ++t) {
      StridedMap dxm(dxp.data() + p.first + p.offsets[t], cin, p.span, Eigen::OuterStride<>(np));
      dxm.noalias() += taps[t].transpose() * dym;
    }
    crop_from(dxp.data(), cin, d, p, dx->data(), true);
  }
}

}  // namespace detail

inline Tensor conv3_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  detail::check_conv_args(x, w, b, stride);
  const int cout = w.shape()[0];
  const int k = w.shape()[2];
  const int rows = x.channels() * k * k * k;
  const Dims od = conv_out_dims(x.dims(), stride);
  const auto nout = static_cast<Eigen::Index>(od.voxels());
  Tensor y = Tensor::feature(cout, od);
  MapMat ym(y.data(), cout, nout);
  ConstMapMat wm(w.data(), cout, rows);
  if (k == 1 && stride == 1) {
    ym.noalias() = wm * ConstMapMat(x.data(), rows, nout);
  } else if (stride == 1) {
    return detail::conv3_shift_forward(x, w, b);
  } else {
    auto& col = detail::scratch_columns();
    detail::im2col(x, k, stride, od, col);
    ym.noalias() = wm * ConstMapMat(col.data(), rows, nout);
  }
  for (int c = 0; c < cout; ++c) ym.row(c).array() += b[c];
  return y;
}

/// Accumulates gradients; any of dx, dw, db may be null.
inline void conv3_backward(const Tensor& x, const Tensor& w, int stride, const Tensor& dy, Tensor* dx,
                           Tensor* dw, Tensor* db) {
  const int cout = w.shape()[0];
  const int k = w.shape()[2];
  const int rows = x.channels() * k * k * k;
  const Dims od = dy.dims();
  const auto nout = static_cast<Eigen::Index>(od.voxels());
  ConstMapMat dym(dy.data(), cout, nout);
  ConstMapMat wm(w.data(), cout, rows);
  const bool direct = (k == 1 && stride == 1);
  if (stride == 1 && !direct) {
    detail::conv3_shift_backward(x, w, dy, dx, dw);
    if (db != nullptr) {
      for (int c = 0; c < cout; ++c) (*db)[c] += dym.row(c).sum();
    }
    return;
  }
  auto& col = detail::scratch_columns();
  if (dw != nullptr) {
    MapMat dwm(dw->data(), cout, rows);
    if (direct) {
      dwm.noalias() += dym * ConstMapMat(x.data(), rows, nout).transpose();
    } else {
      detail::im2col(x, k, stride, od, col);
      dwm.noalias() += dym * ConstMapMat(col.data(), rows, nout).transpose();
    }
  }
  if (db != nullptr) {
    for (int c = 0; c < cout; ++c) (*db)[c] += dym.row(c).sum();
  }
  if (dx != nullptr) {
    if (direct) {
      MapMat(dx->data(), rows, nout).noalias() += wm.transpose() * dym;
    } else {
      col.resize(static_cast<std::size_t>(rows) * od.voxels());
      MapMat(col.data(), rows, nout).noalias() = wm.transpose() * dym;
      detail::col2im(col, k, stride, od, *dx);
    }
  }
}

// ---------------------------------------------------------------------------
// Trilinear x2 upsampling, align-corners-false. Separable: a 1-D operator is
// applied along x, then y, then z. The adjoint applies the transposed 1-D
// operators.

namespace detail {

struct Tap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<Tap> upsample_taps(int n) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * n));
  for (int o = 0; o < 2 * n; ++o) {
    double s = (o + 0.5) / 2.0 - 0.5;
    if (s < 0.0) s = 0.0;
    int i0 = static_cast<int>(std::floor(s));
    if (i0 > n - 1) i0 = n - 1;
    const int i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, s - i0};
  }
  return taps;
}

// Applies `taps` along `axis` of a {C, nz, ny, nx} buffer, producing the
// buffer with that axis resized to taps.size().
inline Tensor resample_axis(const Tensor& in, int axis, const std::vector<Tap>& taps) {
  const int c = in.channels();
  const Dims d = in.dims();
  Dims od = d;
  const int nout = static_cast<int>(taps.size());
  if (axis == 0) od.nx = nout;
  if (axis == 1) od.ny = nout;
  if (axis == 2) od.nz = nout;
  Tensor out = Tensor::feature(c, od);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = in.channel(ch);
    double* dst = out.channel(ch);
    for (int z = 0; z < od.nz; ++z) {
      for (int y = 0; y < od.ny; ++y) {
        for (int x = 0; x < od.nx; ++x) {
          int ix = x, iy = y, iz = z;
          const Tap* t = nullptr;
          if (axis == 0) t = &taps[x];
          if (axis == 1) t = &taps[y];
          if (axis == 2) t = &taps[z];
          int a0x = ix, a0y = iy, a0z = iz, a1x = ix, a1y = iy, a1z = iz;
          if (axis == 0) { a0x = t->i0; a1x = t->i1; }
          if (axis == 1) { a0y = t->i0; a1y = t->i1; }
          if (axis == 2) { a0z = t->i0; a1z = t->i1; }
          dst[od.index(x, y, z)] =
              (1.0 - t->w1) * src[d.index(a0x, a0y, a0z)] + t->w1 * src[d.index(a1x, a1y, a1z)];
        }
      }
    }
  }
  return out;
}

// Transpose of resample_axis: scatters from the resized axis back to extent n.
inline Tensor resample_axis_adjoint(const Tensor& in, int axis, const std::vector<Tap>& taps, int n) {
  const int c = in.channels();
  const Dims d = in.dims();
  Dims od = d;
  if (axis == 0) od.nx = n;
  if (axis == 1) od.ny = n;
  if (axis == 2) od.nz = n;
  Tensor out = Tensor::feature(c, od);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = in.channel(ch);
    double* dst = out.channel(ch);
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          const Tap* t = nullptr;
          if (axis == 0) t = &taps[x];
          if (axis == 1) t = &taps[y];
          if (axis == 2) t = &taps[z];
          int a0x = x, a0y = y, a0z = z, a1x = x, a1y = y, a1z = z;
          if (axis == 0) { a0x = t->i0; a1x = t->i1; }
          if (axis == 1) { a0y = t->i0; a1y = t->i1; }
          if (axis == 2) { a0z = t->i0; a1z = t->i1; }
          const double g = src[d.index(x, y, z)];
          dst[od.index(a0x, a0y, a0z)] += (1.0 - t->w1) * g;
          dst[od.index(a1x, a1y, a1z)] += t->w1 * g;
        }
      }
    }
  }
  return out;
}

}  // namespace detail

inline Tensor upsample2_forward(const Tensor& x) {
  const Dims d = x.dims();
  Tensor t = detail::resample_axis(x, 0, detail::upsample_taps(d.nx));
  t = detail::resample_axis(t, 1, detail::upsample_taps(d.ny));
  return detail::resample_axis(t, 2, detail::upsample_taps(d.nz));
}

/// Exact adjoint of upsample2_forward: maps a {C, 2n...} tensor to {C, n...}.
inline Tensor upsample2_adjoint(const Tensor& y) {
  const Dims d = y.dims();
  const Dims h{d.nx / 2, d.ny / 2, d.nz / 2};
  Tensor t = detail::resample_axis_adjoint(y, 2, detail::upsample_taps(h.nz), h.nz);
  t = detail::resample_axis_adjoint(t, 1, detail::upsample_taps(h.ny), h.ny);
  return detail::resample_axis_adjoint(t, 0, detail::upsample_taps(h.nx), h.nx);
}

// ---------------------------------------------------------------------------
// 2x2x2 average pooling with ceil output extent; edge blocks average over the
// voxels that exist.

inline Tensor avg_pool2_forward(const Tensor& x) {
  const Dims d = x.dims();
  const Dims od = conv_out_dims(d, 2);
  Tensor y = Tensor::feature(x.channels(), od);
  for (int c = 0; c < x.channels(); ++c) {
    const double* src = x.channel(c);
    double* dst = y.channel(c);
    for (int z = 0; z < od.nz; ++z)
      for (int yy = 0; yy < od.ny; ++yy)
        for (int xx = 0; xx < od.nx; ++xx) {
          double s = 0.0;
          int cnt = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int ix = 2 * xx + dx, iy = 2 * yy + dy, iz = 2 * z + dz;
                if (ix < d.nx && iy < d.ny && iz < d.nz) {
                  s += src[d.index(ix, iy, iz)];
                  ++cnt;
                }
              }
          dst[od.index(xx, yy, z)] = s / cnt;
        }
  }
  return y;
}

inline void avg_pool2_backward(const Tensor& dy, Tensor& dx) {
  const Dims d = dx.dims();
  const Dims od = dy.dims();
  for (int c = 0; c < dx.channels(); ++c) {
    const double* src = dy.channel(c);
    double* dst = dx.channel(c);
    for (int z = 0; z < od.nz; ++z)
      for (int yy = 0; yy < od.ny; ++yy)
        for (int xx = 0; xx < od.nx; ++xx) {
          const int cx = std::min(2, d.nx - 2 * xx), cy = std::min(2, d.ny - 2 * yy),
                    cz = std::min(2, d.nz - 2 * z);
          const double g = src[od.index(xx, yy, z)] / (cx * cy * cz);
          for (int dz = 0; dz < cz; ++dz)
            for (int dy2 = 0; dy2 < cy; ++dy2)
              for (int dx2 = 0; dx2 < cx; ++dx2) dst[d.index(2 * xx + dx2, 2 * yy + dy2, 2 * z + dz)] += g;
        }
  }
}

// ---------------------------------------------------------------------------
// Trilinear sampling out(x) = img(x + u(x)), border clamp. u is {3, ...} with
// components (ux, uy, uz) in voxel units.

namespace detail {

struct AxisSample {
  int i0;
  int i1;
  double f;       // fractional weight of i1
  bool inside;    // false when the coordinate was clamped
};

inline AxisSample axis_sample(double p, int n) {
  if (n == 1) return {0, 0, 0.0, false};
  const double hi = static_cast<double>(n - 1);
  bool inside = true;
  if (!(p >= 0.0)) {  // also catches NaN
    p = 0.0;
    inside = false;
  } else if (p > hi) {
    p = hi;
    inside = false;
  }
  int i0 = static_cast<int>(std::floor(p));
  if (i0 >= n - 1) i0 = n - 2;
  return {i0, i0 + 1, p - i0, inside};
}

}  // namespace detail

inline void check_warp_args(const Tensor& img, const Tensor& u) {
  if (!img.is_feature() || !u.is_feature() || u.channels() != 3) {
    throw std::invalid_argument("warp: expected feature image and 3-channel displacement");
  }
  if (!(img.dims() == u.dims())) {
    throw std::invalid_argument("warp: dim mismatch " + to_string(img.dims()) + " vs " + to_string(u.dims()));
  }
}

inline Tensor warp_forward(const Tensor& img, const Tensor& u) {
  check_warp_args(img, u);
  const Dims d = img.dims();
  const int c = img.channels();
  const std::size_t n = d.voxels();
  Tensor out = Tensor::feature(c, d);
  const double* ux = u.channel(0);
  const double* uy = u.channel(1);
  const double* uz = u.channel(2);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t v = d.index(x, y, z);
        const auto sx = detail::axis_sample(x + ux[v], d.nx);
        const auto sy = detail::axis_sample(y + uy[v], d.ny);
        const auto sz = detail::axis_sample(z + uz[v], d.nz);
        const std::size_t i000 = d.index(sx.i0, sy.i0, sz.i0), i100 = d.index(sx.i1, sy.i0, sz.i0),
                          i010 = d.index(sx.i0, sy.i1, sz.i0), i110 = d.index(sx.i1, sy.i1, sz.i0),
                          i001 = d.index(sx.i0, sy.i0, sz.i1), i101 = d.index(sx.i1, sy.i0, sz.i1),
                          i011 = d.index(sx.i0, sy.i1, sz.i1), i111 = d.index(sx.i1, sy.i1, sz.i1);
        const double fx = sx.f, fy = sy.f, fz = sz.f;
        const double w000 = (1 - fx) * (1 - fy) * (1 - fz), w100 = fx * (1 - fy) * (1 - fz),
                     w010 = (1 - fx) * fy * (1 - fz), w110 = fx * fy * (1 - fz), w001 = (1 - fx) * (1 - fy) * fz,
                     w101 = fx * (1 - fy) * fz, w011 = (1 - fx) * fy * fz, w111 = fx * fy * fz;
        for (int ch = 0; ch < c; ++ch) {
          const double* s = img.data() + ch * n;
          out.data()[ch * n + v] = w000 * s[i000] + w100 * s[i100] + w010 * s[i010] + w110 * s[i110] +
                                   w001 * s[i001] + w101 * s[i101] + w011 * s[i011] + w111 * s[i111];
        }
      }
  return out;
}

/// Accumulates d/dimg and d/du; either may be null.
inline void warp_backward(const Tensor& img, const Tensor& u, const Tensor& dout, Tensor* dimg, Tensor* du) {
  const Dims d = img.dims();
  const int c = img.channels();
  const std::size_t n = d.voxels();
  const double* ux = u.channel(0);
  const double* uy = u.channel(1);
  const double* uz = u.channel(2);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t v = d.index(x, y, z);
        const auto sx = detail::axis_sample(x + ux[v], d.nx);
        const auto sy = detail::axis_sample(y + uy[v], d.ny);
        const auto sz = detail::axis_sample(z + uz[v], d.nz);
        const std::size_t i000 = d.index(sx.i0, sy.i0, sz.i0), i100 = d.index(sx.i1, sy.i0, sz.i0),
                          i010 = d.index(sx.i0, sy.i1, sz.i0), i110 = d.index(sx.i1, sy.i1, sz.i0),
                          i001 = d.index(sx.i0, sy.i0, sz.i1), i101 = d.index(sx.i1, sy.i0, sz.i1),
                          i011 = d.index(sx.i0, sy.i1, sz.i1), i111 = d.index(sx.i1, sy.i1, sz.i1);
        const double fx = sx.f, fy = sy.f, fz = sz.f;
        double gx = 0.0, gy = 0.0, gz = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = dout.data()[ch * n + v];
          if (g == 0.0) continue;
          const double* s = img.data() + ch * n;
          if (dimg != nullptr) {
            double* ds = dimg->data() + ch * n;
            ds[i000] += g * (1 - fx) * (1 - fy) * (1 - fz);
            ds[i100] += g * fx * (1 - fy) * (1 - fz);
            ds[i010] += g * (1 - fx) * fy * (1 - fz);
            ds[i110] += g * fx * fy * (1 - fz);
            ds[i001] += g * (1 - fx) * (1 - fy) * fz;
            ds[i101] += g * fx * (1 - fy) * fz;
            ds[i011] += g * (1 - fx) * fy * fz;
            ds[i111] += g * fx * fy * fz;
          }
          if (du != nullptr) {
            const double c00 = s[i100] - s[i000], c10 = s[i110] - s[i010], c01 = s[i101] - s[i001],
                         c11 = s[i111] - s[i011];
            gx += g * ((1 - fy) * (1 - fz) * c00 + fy * (1 - fz) * c10 + (1 - fy) * fz * c01 + fy * fz * c11);
            const double e00 = s[i010] - s[i000], e10 = s[i110] - s[i100], e01 = s[i011] - s[i001],
                         e11 = s[i111] - s[i101];
            gy += g * ((1 - fx) * (1 - fz) * e00 + fx * (1 - fz) * e10 + (1 - fx) * fz * e01 + fx * fz * e11);
            const double h00 = s[i001] - s[i000], h10 = s[i101] - s[i100], h01 = s[i011] - s[i010],
                         h11 = s[i111] - s[i110];
            gz += g * ((1 - fx) * (1 - fy) * h00 + fx * (1 - fy) * h10 + (1 - fx) * fy * h01 + fx * fy * h11);
          }
        }
        if (du != nullptr) {
          if (sx.inside) du->data()[v] += gx;
          if (sy.inside) du->data()[n + v] += gy;
          if (sz.inside) du->data()[2 * n + v] += gz;
        }
      }
}

// ---------------------------------------------------------------------------
// Window sums with zero padding; odd window w. The operator is symmetric, so
// it is its own adjoint.

inline std::vector<double> box_sum(const std::vector<double>& in, Dims d, int w) {
  const int r = w / 2;
  std::vector<double> a = in, b(in.size());
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const int pos = axis == 0 ? x : (axis == 1 ? y : z);
          const std::size_t v = d.index(x, y, z);
          double s = 0.0;
          const int lo = std::max(0, pos - r), hi = std::min(n - 1, pos + r);
          for (int q = lo; q <= hi; ++q) {
            s += a[v + (static_cast<std::ptrdiff_t>(q) - pos) * static_cast<std::ptrdiff_t>(stride)];
          }
          b[v] = s;
        }
    std::swap(a, b);
  }
  return a;
}

}  // namespace condatlas::kernels
