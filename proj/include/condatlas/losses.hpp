#pragma once

// Training objective: bidirectional local NCC, one-hot MSE, deformation
// regularizer, adversarial terms and their weighted total.

#include <condatlas/autodiff.hpp>
#include <condatlas/kernels.hpp>
#include <condatlas/volume.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace condatlas {

struct LossWeights {
  double img = 1.0;
  double seg = 0.5;
  double def = 1.0;
  double grad = 0.5;
  double disc = 0.5;

  void validate() const {
    if (img < 0 || seg < 0 || def < 0 || grad < 0 || disc < 0) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
  }
};

inline constexpr double kNccVarianceFloor = 1e-5;

namespace detail {

struct NccTerms {
  std::vector<double> si, sj, sii, sjj, sij;
  std::vector<double> count;  // in-grid voxels per window (windows are clipped at the faces)
};

inline std::vector<double> window_counts(Dims d, int window) {
  const int r = window / 2;
  auto extent = [r](int p, int n) { return static_cast<double>(std::min(p + r, n - 1) - std::max(p - r, 0) + 1); };
  std::vector<double> c(d.voxels());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) c[d.index(x, y, z)] = extent(x, d.nx) * extent(y, d.ny) * extent(z, d.nz);
  return c;
}

inline NccTerms ncc_terms(const double* a, const double* b, Dims d, int window) {
  const std::size_t n = d.voxels();
  std::vector<double> va(a, a + n), vb(b, b + n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  return {kernels::box_sum(va, d, window), kernels::box_sum(vb, d, window), kernels::box_sum(aa, d, window),
          kernels::box_sum(bb, d, window),  kernels::box_sum(ab, d, window), window_counts(d, window)};
}

inline void check_ncc_args(Dims da, Dims db, int window) {
  if (!(da == db)) throw std::invalid_argument("ncc_local: dim mismatch");
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("ncc_local: window must be odd");
  if (window > std::min({da.nx, da.ny, da.nz})) throw std::invalid_argument("ncc_local: window exceeds grid");
}

}  // namespace detail

/// Mean squared local correlation coefficient in [0, 1].
inline double ncc_local(const double* a, const double* b, Dims d, int window = 5) {
  const auto t = detail::ncc_terms(a, b, d, window);
  const std::size_t n = d.voxels();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cross = t.sij[i] - t.si[i] * t.sj[i] / t.count[i];
    const double iv = t.sii[i] - t.si[i] * t.si[i] / t.count[i];
    const double jv = t.sjj[i] - t.sj[i] * t.sj[i] / t.count[i];
    acc += cross * cross / (iv * jv + kNccVarianceFloor);
  }
  return acc / static_cast<double>(n);
}

inline double ncc_local(const Volume3D& a, const Volume3D& b, int window = 5) {
  detail::check_ncc_args(a.dims, b.dims, window);
  return ncc_local(a.data.data(), b.data.data(), a.dims, window);
}

/// Mean over voxels and channels of the squared difference.
inline double loss_seg(const OneHotLabelMap& warped_subject_labels, const OneHotLabelMap& template_labels) {
  if (!(warped_subject_labels.dims == template_labels.dims)) throw std::invalid_argument("loss_seg: dim mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < template_labels.data.size(); ++i) {
    const double d = warped_subject_labels.data[i] - template_labels.data[i];
    s += d * d;
  }
  return s / static_cast<double>(template_labels.data.size());
}

namespace detail {

struct RegParts {
  double magnitude;  // mean |u|^2
  double gradient;   // sum over axes of mean squared forward difference (all components)
};

inline RegParts reg_parts(const Tensor& u) {
  const Dims d = u.dims();
  const std::size_t n = d.voxels();
  double mag = 0.0;
  for (double v : u.values()) mag += v * v;
  mag /= static_cast<double>(n);
  double grad = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    if (d[axis] < 2) continue;
    const int ox = axis == 0, oy = axis == 1, oz = axis == 2;
    double s = 0.0;
    std::size_t m = 0;
    for (int z = 0; z + oz < d.nz; ++z)
      for (int y = 0; y + oy < d.ny; ++y)
        for (int x = 0; x + ox < d.nx; ++x) {
          const std::size_t v0 = d.index(x, y, z), v1 = d.index(x + ox, y + oy, z + oz);
          for (int c = 0; c < 3; ++c) {
            const double diff = u[c * n + v1] - u[c * n + v0];
            s += diff * diff;
          }
          ++m;
        }
    grad += s / static_cast<double>(m);
  }
  return {mag, grad};
}

}  // namespace detail

/// lambda_def * mean(|u|^2) + lambda_grad * sum over axes of mean(|forward diff|^2).
/// Differences that would leave the grid are omitted from their axis mean.
inline double loss_reg(const VectorField3D& u, double lambda_def, double lambda_grad) {
  const auto p = detail::reg_parts(to_tensor(u));
  return lambda_def * p.magnitude + lambda_grad * p.gradient;
}

inline double loss_adv_g(double logit_fake) { return -logit_fake; }

inline double loss_adv_d(double logit_real, double logit_fake) {
  return std::max(0.0, 1.0 - logit_real) + std::max(0.0, 1.0 + logit_fake);
}

enum class AdversarialObjective { hinge, logistic };

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// Discriminator loss under either objective (logistic = non-saturating GAN).
inline double loss_adv_d(double logit_real, double logit_fake, AdversarialObjective obj) {
  if (obj == AdversarialObjective::hinge) return loss_adv_d(logit_real, logit_fake);
  return softplus(-logit_real) + softplus(logit_fake);
}

struct LossParts {
  double img = 0.0;
  double seg = 0.0;
  double reg = 0.0;  // already weighted by lambda_def / lambda_grad
  double adv_g = 0.0;
};

inline double loss_total(const LossParts& p, const LossWeights& w) {
  return w.img * p.img + w.seg * p.seg + p.reg + w.disc * p.adv_g;
}

// ---------------------------------------------------------------------------
// Tape versions.

namespace ad {

inline Var ncc_local(Var a, Var b, int window = 5) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.channels() != 1 || bv.channels() != 1) throw std::invalid_argument("ncc_local: single-channel inputs");
  condatlas::detail::check_ncc_args(av.dims(), bv.dims(), window);
  const double value = condatlas::ncc_local(av.data(), bv.data(), av.dims(), window);
  return a.tape->record(Tensor::scalar(value), {a, b}, [a, b, window](Tape& tp) {
    const Tensor& I = tp.value(a.id);
    const Tensor& J = tp.value(b.id);
    const Dims d = I.dims();
    const std::size_t n = d.voxels();
    const auto t = condatlas::detail::ncc_terms(I.data(), J.data(), d, window);
    const double g = tp.upstream()[0] / static_cast<double>(n);
    std::vector<double> g_si(n), g_sj(n), g_sii(n), g_sjj(n), g_sij(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double cross = t.sij[i] - t.si[i] * t.sj[i] / t.count[i];
      const double iv = t.sii[i] - t.si[i] * t.si[i] / t.count[i];
      const double jv = t.sjj[i] - t.sj[i] * t.sj[i] / t.count[i];
      const double den = iv * jv + kNccVarianceFloor;
      const double d_cross = g * 2.0 * cross / den;
      const double d_iv = -g * cross * cross * jv / (den * den);
      const double d_jv = -g * cross * cross * iv / (den * den);
      g_sij[i] = d_cross;
      g_sii[i] = d_iv;
      g_sjj[i] = d_jv;
      g_si[i] = -d_cross * t.sj[i] / t.count[i] - 2.0 * d_iv * t.si[i] / t.count[i];
      g_sj[i] = -d_cross * t.si[i] / t.count[i] - 2.0 * d_jv * t.sj[i] / t.count[i];
    }
    const auto b_sij = kernels::box_sum(g_sij, d, window);
    if (tp.requires_grad(a.id)) {
      const auto b_si = kernels::box_sum(g_si, d, window);
      const auto b_sii = kernels::box_sum(g_sii, d, window);
      Tensor& da = tp.grad(a.id);
      for (std::size_t i = 0; i < n; ++i) da[i] += b_si[i] + 2.0 * I[i] * b_sii[i] + J[i] * b_sij[i];
    }
    if (tp.requires_grad(b.id)) {
      const auto b_sj = kernels::box_sum(g_sj, d, window);
      const auto b_sjj = kernels::box_sum(g_sjj, d, window);
      Tensor& db = tp.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) db[i] += b_sj[i] + 2.0 * J[i] * b_sjj[i] + I[i] * b_sij[i];
    }
  });
}

inline Var loss_reg(Var u, double lambda_def, double lambda_grad) {
  const Tensor& uv = u.value();
  if (uv.channels() != 3) throw std::invalid_argument("loss_reg: expected 3-channel field");
  const auto p = condatlas::detail::reg_parts(uv);
  const double value = lambda_def * p.magnitude + lambda_grad * p.gradient;
  return u.tape->record(Tensor::scalar(value), {u}, [u, lambda_def, lambda_grad](Tape& tp) {
    const Tensor& U = tp.value(u.id);
    const Dims d = U.dims();
    const std::size_t n = d.voxels();
    const double g = tp.upstream()[0];
    Tensor& du = tp.grad(u.id);
    const double cm = g * lambda_def * 2.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < du.size(); ++i) du[i] += cm * U[i];
    for (int axis = 0; axis < 3; ++axis) {
      if (d[axis] < 2) continue;
      const int ox = axis == 0, oy = axis == 1, oz = axis == 2;
      const std::size_t m = static_cast<std::size_t>(d.nx - ox) * (d.ny - oy) * (d.nz - oz);
      const double cg = g * lambda_grad * 2.0 / static_cast<double>(m);
      for (int z = 0; z + oz < d.nz; ++z)
        for (int y = 0; y + oy < d.ny; ++y)
          for (int x = 0; x + ox < d.nx; ++x) {
            const std::size_t v0 = d.index(x, y, z), v1 = d.index(x + ox, y + oy, z + oz);
            for (int c = 0; c < 3; ++c) {
              const double diff = U[c * n + v1] - U[c * n + v0];
              du[c * n + v1] += cg * diff;
              du[c * n + v0] -= cg * diff;
            }
          }
    }
  });
}

/// Bidirectional image term: -(ncc(template o phi, subject) + ncc(subject o phi^-1, template)) / 2.
inline Var loss_img(Var template_warped, Var subject, Var subject_warped_back, Var template_img, int window) {
  Var fwd = ncc_local(template_warped, subject, window);
  Var bwd = ncc_local(subject_warped_back, template_img, window);
  return weighted_sum({{-0.5, fwd}, {-0.5, bwd}});
}

inline Var hinge_d(Var logit_real, Var logit_fake) {
  const double r = logit_real.value()[0], f = logit_fake.value()[0];
  const double value = condatlas::loss_adv_d(r, f);
  return logit_real.tape->record(Tensor::scalar(value), {logit_real, logit_fake},
                                 [logit_real, logit_fake, r, f](Tape& tp) {
                                   const double g = tp.upstream()[0];
                                   if (tp.requires_grad(logit_real.id) && 1.0 - r > 0.0) {
                                     tp.grad(logit_real.id)[0] -= g;
                                   }
                                   if (tp.requires_grad(logit_fake.id) && 1.0 + f > 0.0) {
                                     tp.grad(logit_fake.id)[0] += g;
                                   }
                                 });
}

inline Var logistic_d(Var logit_real, Var logit_fake) {
  const double r = logit_real.value()[0], f = logit_fake.value()[0];
  const double value = softplus(-r) + softplus(f);
  return logit_real.tape->record(Tensor::scalar(value), {logit_real, logit_fake},
                                 [logit_real, logit_fake, r, f](Tape& tp) {
                                   const double g = tp.upstream()[0];
                                   auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
                                   if (tp.requires_grad(logit_real.id)) tp.grad(logit_real.id)[0] -= g * sig(-r);
                                   if (tp.requires_grad(logit_fake.id)) tp.grad(logit_fake.id)[0] += g * sig(f);
                                 });
}

/// Generator-side adversarial term. Hinge: -logit; logistic: softplus(-logit).
inline Var adv_g(Var logit_fake, AdversarialObjective obj) {
  if (obj == AdversarialObjective::hinge) return scale(logit_fake, -1.0);
  const double f = logit_fake.value()[0];
  return logit_fake.tape->record(Tensor::scalar(softplus(-f)), {logit_fake}, [logit_fake, f](Tape& tp) {
    tp.grad(logit_fake.id)[0] -= tp.upstream()[0] / (1.0 + std::exp(f));
  });
}

}  // namespace ad
}  // namespace condatlas
