#pragma once

// Check suites shared by the unit tests and the acceptance runner. Each
// suite returns named measurements with their tolerance so both callers
// report the same numbers.

#include "support.hpp"

#include <condatlas/csv.hpp>
#include <condatlas/losses.hpp>
#include <condatlas/metrics.hpp>
#include <condatlas/nets.hpp>
#include <condatlas/params.hpp>
#include <condatlas/phantom.hpp>
#include <condatlas/train.hpp>
#include <condatlas/trajectory.hpp>
#include <condatlas/vvol_io.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cstring>
#include <optional>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace testing_support {

struct Check {
  std::string name;
  double value = 0.0;
  double tol = 0.0;
  bool pass = false;
};

inline Check at_most(std::string name, double value, double tol) {
  return {std::move(name), value, tol, value <= tol};
}
inline Check at_least(std::string name, double value, double tol) {
  return {std::move(name), value, tol, value >= tol};
}
inline Check holds(std::string name, bool ok) { return {std::move(name), ok ? 1.0 : 0.0, 1.0, ok}; }

inline bool all_pass(const std::vector<Check>& cs) {
  return std::all_of(cs.begin(), cs.end(), [](const Check& c) { return c.pass; });
}

// ---------------------------------------------------------------------------
// Operator gradients

struct OpCase {
  std::string name;
  ScalarFn fn;
  std::function<std::vector<Tensor>(Rng&)> inputs;
};

/// Moves values away from a kink at `at` so central differences are valid.
inline Tensor away_from(Tensor t, double at, double gap = 1e-2) {
  for (auto& v : t.values()) {
    if (std::abs(v - at) < gap) v = at + (v < at ? -gap : gap);
  }
  return t;
}

inline std::vector<OpCase> op_cases() {
  const Dims d5{5, 6, 7}, d4{4, 6, 8}, d8{8, 8, 8};
  std::vector<OpCase> cs;
  auto proj_out = [](std::vector<int> shape, std::uint64_t seed) {
    Rng r(seed);
    return random_tensor(std::move(shape), r);
  };
  for (int stride : {1, 2}) {
    for (int k : {1, 3}) {
      const Dims dd = stride == 1 ? d5 : d4;
      const Dims od = kernels::conv_out_dims(dd, stride);
      const Tensor wout = proj_out({4, od.nz, od.ny, od.nx}, 11);
      cs.push_back({"conv3 k" + std::to_string(k) + " stride " + std::to_string(stride),
                    [wout](Tape&, const std::vector<Var>& v) {
                      return project(ad::conv3(v[0], v[1], v[2], v[3].value()[0] > 1.5 ? 2 : 1), wout);
                    },
                    [dd, k, stride](Rng& r) {
                      return std::vector<Tensor>{random_feature(3, dd, r), random_tensor({4, 3, k, k, k}, r),
                                                 random_tensor({4}, r), Tensor::scalar(stride)};
                    }});
    }
  }
  cs.push_back({"film",
                [w = proj_out({3, d5.nz, d5.ny, d5.nx}, 12)](Tape&, const std::vector<Var>& v) {
                  return project(ad::film(v[0], v[1], v[2]), w);
                },
                [d5](Rng& r) {
                  return std::vector<Tensor>{random_feature(3, d5, r), random_tensor({3}, r), random_tensor({3}, r)};
                }});
  for (double slope : {0.2, 0.0}) {
    cs.push_back({"leaky_relu slope " + csv::format_number(slope),
                  [w = proj_out({2, d5.nz, d5.ny, d5.nx}, 13), slope](Tape&, const std::vector<Var>& v) {
                    return project(ad::leaky_relu(v[0], slope), w);
                  },
                  [d5](Rng& r) { return std::vector<Tensor>{away_from(random_feature(2, d5, r), 0.0)}; }});
  }
  cs.push_back({"sigmoid",
                [w = proj_out({2, d5.nz, d5.ny, d5.nx}, 14)](Tape&, const std::vector<Var>& v) {
                  return project(ad::sigmoid(v[0]), w);
                },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(2, d5, r, -3, 3)}; }});
  cs.push_back({"softmax_channels",
                [w = proj_out({7, d5.nz, d5.ny, d5.nx}, 15)](Tape&, const std::vector<Var>& v) {
                  return project(ad::softmax_channels(v[0]), w);
                },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(7, d5, r, -3, 3)}; }});
  cs.push_back({"upsample2",
                [w = proj_out({2, 8, 6, 4}, 16)](Tape&, const std::vector<Var>& v) {
                  return project(ad::upsample2(v[0]), w);
                },
                [](Rng& r) { return std::vector<Tensor>{random_feature(2, {2, 3, 4}, r)}; }});
  cs.push_back({"avg_pool2",
                [w = proj_out({2, 4, 3, 2}, 17)](Tape&, const std::vector<Var>& v) {
                  return project(ad::avg_pool2(v[0]), w);
                },
                [d4](Rng& r) { return std::vector<Tensor>{random_feature(2, d4, r)}; }});
  cs.push_back({"concat",
                [w = proj_out({5, d5.nz, d5.ny, d5.nx}, 18)](Tape&, const std::vector<Var>& v) {
                  return project(ad::concat(v[0], v[1]), w);
                },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(2, d5, r), random_feature(3, d5, r)}; }});
  cs.push_back({"add scale add_scalar",
                [w = proj_out({2, d5.nz, d5.ny, d5.nx}, 19)](Tape&, const std::vector<Var>& v) {
                  return project(ad::add_scalar(ad::add(ad::scale(v[0], -1.7), v[1]), 0.3), w);
                },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(2, d5, r), random_feature(2, d5, r)}; }});
  cs.push_back({"slice linear",
                [w = proj_out({6}, 20)](Tape&, const std::vector<Var>& v) {
                  return project(ad::linear(v[0], ad::slice(v[1], 3, 5), v[2]), w);
                },
                [](Rng& r) {
                  return std::vector<Tensor>{random_tensor({6, 5}, r), random_tensor({12}, r), random_tensor({6}, r)};
                }});
  cs.push_back({"dot sum", [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::scale(ad::dot(v[0], v[1]), 2.0)); },
                [](Rng& r) { return std::vector<Tensor>{random_tensor({9}, r), random_tensor({9}, r)}; }});
  cs.push_back({"global_sum_pool",
                [w = proj_out({3}, 21)](Tape&, const std::vector<Var>& v) {
                  return project(ad::global_sum_pool(v[0]), w);
                },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(3, d5, r)}; }});
  cs.push_back({"warp",
                [w = proj_out({2, d8.nz, d8.ny, d8.nx}, 22)](Tape&, const std::vector<Var>& v) {
                  return project(ad::warp(v[0], v[1]), w);
                },
                [d8](Rng& r) {
                  return std::vector<Tensor>{random_feature(2, d8, r), random_feature(3, d8, r, -1.5, 1.5)};
                }});
  cs.push_back({"integrate_ss",
                [w = proj_out({3, d8.nz, d8.ny, d8.nx}, 23)](Tape&, const std::vector<Var>& v) {
                  return project(ad::integrate_ss(v[0], 7), w);
                },
                [d8](Rng& r) { return std::vector<Tensor>{smooth_field(d8, r, 2.0)}; }});
  cs.push_back({"mse", [](Tape&, const std::vector<Var>& v) { return ad::mse(v[0], v[1]); },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(7, d5, r), random_feature(7, d5, r)}; }});
  cs.push_back({"weighted_sum",
                [](Tape&, const std::vector<Var>& v) {
                  return ad::weighted_sum({{0.5, ad::sum(v[0])}, {-2.0, ad::dot(v[0], v[1])}});
                },
                [](Rng& r) { return std::vector<Tensor>{random_tensor({4}, r), random_tensor({4}, r)}; }});
  cs.push_back({"ncc_local", [](Tape&, const std::vector<Var>& v) { return ad::ncc_local(v[0], v[1], 5); },
                [](Rng& r) {
                  return std::vector<Tensor>{random_feature(1, {7, 7, 7}, r, 0, 1), random_feature(1, {7, 7, 7}, r, 0, 1)};
                }});
  cs.push_back({"loss_reg", [](Tape&, const std::vector<Var>& v) { return ad::loss_reg(v[0], 0.3, 0.7); },
                [d5](Rng& r) { return std::vector<Tensor>{random_feature(3, d5, r)}; }});
  cs.push_back({"loss_img bidirectional",
                [](Tape&, const std::vector<Var>& v) {
                  Var u = ad::integrate_ss(v[2], 7);
                  Var ui = ad::integrate_ss(ad::scale(v[2], -1.0), 7);
                  return ad::loss_img(ad::warp(v[0], u), v[1], ad::warp(v[1], ui), v[0], 3);
                },
                [d8](Rng& r) {
                  return std::vector<Tensor>{random_feature(1, d8, r, 0, 1), random_feature(1, d8, r, 0, 1),
                                             smooth_field(d8, r, 1.5)};
                }});
  cs.push_back({"loss_seg warped labels",
                [](Tape&, const std::vector<Var>& v) {
                  return ad::mse(ad::warp(v[0], ad::integrate_ss(v[1], 7)), ad::softmax_channels(v[2]));
                },
                [d8](Rng& r) {
                  return std::vector<Tensor>{random_feature(7, d8, r, 0, 1), smooth_field(d8, r, 1.5),
                                             random_feature(7, d8, r)};
                }});
  cs.push_back({"hinge_d", [](Tape&, const std::vector<Var>& v) { return ad::hinge_d(v[0], v[1]); },
                [](Rng& r) {
                  return std::vector<Tensor>{away_from(random_tensor({1}, r, -2, 2), 1.0),
                                             away_from(random_tensor({1}, r, -2, 2), -1.0)};
                }});
  cs.push_back({"logistic_d", [](Tape&, const std::vector<Var>& v) { return ad::logistic_d(v[0], v[1]); },
                [](Rng& r) { return std::vector<Tensor>{random_tensor({1}, r, -4, 4), random_tensor({1}, r, -4, 4)}; }});
  cs.push_back({"adv_g hinge",
                [](Tape&, const std::vector<Var>& v) { return ad::adv_g(v[0], AdversarialObjective::hinge); },
                [](Rng& r) { return std::vector<Tensor>{random_tensor({1}, r, -4, 4)}; }});
  cs.push_back({"adv_g logistic",
                [](Tape&, const std::vector<Var>& v) { return ad::adv_g(v[0], AdversarialObjective::logistic); },
                [](Rng& r) { return std::vector<Tensor>{random_tensor({1}, r, -4, 4)}; }});
  return cs;
}

/// Worst relative FD error of one operator over `trials` random draws.
inline double op_gradient_error(const OpCase& c, int trials, std::uint64_t seed) {
  Rng rng(derive_seed(seed, hash_name(c.name)));
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    auto in = c.inputs(rng);
    // The trailing stride scalar of the conv cases is a constant, not an input.
    if (c.name.rfind("conv3", 0) == 0) {
      const Tensor stride = in.back();
      in.pop_back();
      ScalarFn fn = [&c, stride](Tape& tp, const std::vector<Var>& v) {
        auto all = v;
        all.push_back(tp.leaf(stride, false));
        return c.fn(tp, all);
      };
      worst = std::max(worst, gradient_error(fn, in, rng));
    } else {
      worst = std::max(worst, gradient_error(c.fn, in, rng));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// End-to-end network gradients on a small grid

inline constexpr double kNetTolerance = 1e-4;

// Slope jump between one-sided differences that marks a kink sample. Across
// a kink the central difference can be off by half the jump, so a sample is
// only certifiable at kNetTolerance when the jump stays below twice that.
inline constexpr double kKinkThreshold = 2.0 * kNetTolerance;

inline TrainConfig small_config(bool disc, AdversarialObjective obj = AdversarialObjective::hinge) {
  TrainConfig cfg;
  cfg.arch.dims = {8, 8, 8};
  cfg.arch.gen_seed_channels = 4;
  cfg.arch.gen_widths = {8, 6, 4};
  cfg.arch.film_hidden = {8, 8};
  cfg.arch.reg_widths = {4, 6, 8};
  cfg.arch.disc_widths = {4, 6, 8};
  cfg.ncc_window = 3;
  cfg.weights.disc = disc ? 0.1 : 0.0;
  cfg.adversarial = obj;
  cfg.raw_min = 21;
  cfg.raw_max = 37;
  return cfg;
}

inline Subject phantom_subject(Dims d, double a_norm, std::uint64_t seed) {
  PhantomSpec spec;
  spec.dims = d;
  auto ps = make_subject(spec, a_norm, seed);
  Subject s;
  s.entry.a_norm = a_norm;
  s.entry.a_raw = 21 + 16 * a_norm;
  s.entry.seed = seed;
  s.image = std::move(ps.image);
  s.labels = std::move(ps.labels);
  return s;
}

/// Worst FD error of a parameter-gradient objective: `loss` returns the
/// scalar and (optionally) fills analytic gradients. Entries where the loss
/// is not smooth at scale h (leaky ReLU switches, trilinear cell edges) are
/// redrawn; `rejected` counts them. Two signs mark such an entry: one-sided
/// differences that disagree, or central differences at h and h/10 that
/// disagree (several small kinks inside the step). Neither test looks at the
/// analytic gradient.
template <class Fn>
double param_gradient_error(const ParamStore& ps, Fn loss, Rng& rng, int entries, int* rejected = nullptr,
                            double h = 1e-5) {
  GradStore g;
  const double f0 = loss(ps, &g);
  std::vector<std::string> names;
  for (const auto& [name, _] : g) names.push_back(name);
  double worst = 0.0;
  int accepted = 0, skipped = 0;
  while (accepted < entries && skipped < 4 * entries) {
    const auto& name = names[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(names.size()) - 1))];
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(g.at(name).size()) - 1));
    ParamStore p = ps, m = ps;
    p.at(name)[i] += h;
    m.at(name)[i] -= h;
    const double fp = loss(p, nullptr), fm = loss(m, nullptr);
    const double num = (fp - fm) / (2.0 * h);
    const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
    ParamStore p2 = ps, m2 = ps;
    p2.at(name)[i] += h / 10;
    m2.at(name)[i] -= h / 10;
    const double fine = (loss(p2, nullptr) - loss(m2, nullptr)) / (2.0 * h / 10);
    const double scale = std::max(1.0, std::abs(num));
    if (std::abs(fwd - bwd) > kKinkThreshold * scale || std::abs(num - fine) > kKinkThreshold / 4 * scale) {
      ++skipped;
      continue;
    }
    ++accepted;
    worst = std::max(worst, std::abs(g.at(name)[i] - num) / std::max(1.0, std::abs(num)));
  }
  if (rejected) *rejected += skipped;
  if (accepted < entries) return std::numeric_limits<double>::infinity();
  return worst;
}

inline double generator_objective_error(bool disc, int trials, std::uint64_t seed, int* rejected = nullptr) {
  Rng rng(seed);
  const TrainConfig cfg = small_config(disc);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const ParamStore ps = init_params(cfg.arch, rng.next());
    // Perturb the zero-initialized velocity head so u is not identically 0.
    ParamStore live = ps;
    for (auto& [name, v] : live) {
      if (name.rfind("reg.", 0) == 0) {
        for (auto& x : v.values()) x += rng.uniform(-0.05, 0.05);
      }
    }
    const Subject s = phantom_subject(cfg.arch.dims, rng.uniform(), rng.next());
    auto loss = [&](const ParamStore& p, GradStore* g) {
      auto r = g_sample(s, p, cfg, 1.0);
      if (g) *g = std::move(r.grads);
      return r.losses.total;
    };
    worst = std::max(worst, param_gradient_error(live, loss, rng, 16, rejected));
  }
  return worst;
}

inline double discriminator_objective_error(AdversarialObjective obj, int trials, std::uint64_t seed,
                                           int* rejected = nullptr) {
  Rng rng(seed);
  const TrainConfig cfg = small_config(true, obj);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const ParamStore ps = init_params(cfg.arch, rng.next());
    const Subject s = phantom_subject(cfg.arch.dims, rng.uniform(), rng.next());
    const std::uint64_t aug = rng.next();
    auto loss = [&](const ParamStore& p, GradStore* g) {
      auto r = d_sample(s, p, cfg, 1.0, aug);
      if (g) *g = std::move(r.grads);
      return r.losses.total;
    };
    worst = std::max(worst, param_gradient_error(ps, loss, rng, 16, rejected));
  }
  return worst;
}

inline constexpr double kOpTolerance = 1e-5;

inline std::vector<Check> gradient_suite(int trials, std::uint64_t seed) {
  std::vector<Check> out;
  for (const auto& c : op_cases()) out.push_back(at_most("grad " + c.name, op_gradient_error(c, trials, seed), kOpTolerance));
  int rejected = 0;
  out.push_back(at_most("grad generator+registration objective",
                        generator_objective_error(false, trials, seed + 1, &rejected), kNetTolerance));
  out.push_back(at_most("grad generator objective with adversarial term",
                        generator_objective_error(true, trials, seed + 2, &rejected), kNetTolerance));
  out.push_back(at_most("grad discriminator hinge",
                        discriminator_objective_error(AdversarialObjective::hinge, trials, seed + 3, &rejected),
                        kNetTolerance));
  out.push_back(at_most("grad discriminator logistic",
                        discriminator_objective_error(AdversarialObjective::logistic, trials, seed + 4, &rejected),
                        kNetTolerance));
  // Kink samples are expected to be rare; a flood of them would hide errors.
  out.push_back(at_most("network samples rejected as kinks (of " + std::to_string(4 * trials * 16) + ")", rejected,
                        0.05 * 4 * trials * 16));
  return out;
}

// ---------------------------------------------------------------------------
// Reference implementations used as oracles

namespace oracle {

/// Trilinear sample of channel c at a continuous point, coordinates clamped.
inline double sample(const Tensor& t, int c, double x, double y, double z) {
  const Dims d = t.dims();
  auto clampf = [](double p, int n) { return std::clamp(p, 0.0, static_cast<double>(n - 1)); };
  x = clampf(x, d.nx);
  y = clampf(y, d.ny);
  z = clampf(z, d.nz);
  const int x0 = std::min(static_cast<int>(x), d.nx - 1), y0 = std::min(static_cast<int>(y), d.ny - 1),
            z0 = std::min(static_cast<int>(z), d.nz - 1);
  const int x1 = std::min(x0 + 1, d.nx - 1), y1 = std::min(y0 + 1, d.ny - 1), z1 = std::min(z0 + 1, d.nz - 1);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  const double* p = t.channel(c);
  auto v = [&](int a, int b, int e) { return p[d.index(a, b, e)]; };
  const double c00 = v(x0, y0, z0) * (1 - fx) + v(x1, y0, z0) * fx;
  const double c10 = v(x0, y1, z0) * (1 - fx) + v(x1, y1, z0) * fx;
  const double c01 = v(x0, y0, z1) * (1 - fx) + v(x1, y0, z1) * fx;
  const double c11 = v(x0, y1, z1) * (1 - fx) + v(x1, y1, z1) * fx;
  return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
}

/// det(I + grad u) at one voxel via Eigen, one-sided differences on faces.
inline double jacobian_at(const VectorField3D& u, int x, int y, int z) {
  const Dims d = u.dims;
  Eigen::Matrix3d J = Eigen::Matrix3d::Identity();
  const int p[3] = {x, y, z};
  for (int axis = 0; axis < 3; ++axis) {
    int lo[3] = {x, y, z}, hi[3] = {x, y, z};
    double span = 2.0;
    if (p[axis] == 0) {
      hi[axis] = 1;
      span = 1.0;
    } else if (p[axis] == d[axis] - 1) {
      lo[axis] = d[axis] - 2;
      span = 1.0;
    } else {
      lo[axis] = p[axis] - 1;
      hi[axis] = p[axis] + 1;
    }
    for (int c = 0; c < 3; ++c) {
      J(c, axis) += (u.at(c, d.index(hi[0], hi[1], hi[2])) - u.at(c, d.index(lo[0], lo[1], lo[2]))) / span;
    }
  }
  return J.determinant();
}

inline double deformation_norm(const VectorField3D& u) {
  double s = 0.0;
  for (std::size_t v = 0; v < u.dims.voxels(); ++v) {
    s += std::hypot(u.at(0, v), u.at(1, v), u.at(2, v));
  }
  return s;
}

inline double efc(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  long double ss = 0;
  for (double v : x) ss += static_cast<long double>(v) * v;
  const double b = std::sqrt(static_cast<double>(ss));
  long double e = 0;
  for (double v : x) {
    const double r = v / b;
    e -= static_cast<long double>(r) * std::log(r + 1e-12);
  }
  return static_cast<double>(e) / (-std::sqrt(n) * std::log(1.0 / std::sqrt(n)));
}

inline double dsc(const OneHotLabelMap& a, const OneHotLabelMap& b, int c) {
  double inter = 0, na = 0, nb = 0;
  for (std::size_t v = 0; v < a.dims.voxels(); ++v) {
    const bool pa = a.label(v) == c, pb = b.label(v) == c;
    inter += pa && pb;
    na += pa;
    nb += pb;
  }
  if (na + nb == 0) return std::numeric_limits<double>::quiet_NaN();
  return 2 * inter / (na + nb);
}

inline std::vector<std::array<int, 3>> boundary(const OneHotLabelMap& m, int c) {
  const Dims d = m.dims;
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (m.label(d.index(x, y, z)) != c) continue;
        bool edge = false;
        const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
        for (const auto& o : nb) {
          const int a = x + o[0], b = y + o[1], e = z + o[2];
          if (a < 0 || b < 0 || e < 0 || a >= d.nx || b >= d.ny || e >= d.nz || m.label(d.index(a, b, e)) != c) {
            edge = true;
          }
        }
        if (edge) out.push_back({x, y, z});
      }
  return out;
}

/// numpy-style linear percentile.
inline double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double h = 0.95 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

inline double hd95(const OneHotLabelMap& a, const OneHotLabelMap& b, int c, Spacing s) {
  const auto sa = boundary(a, c), sb = boundary(b, c);
  if (sa.empty() || sb.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> all;
  auto directed = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        best = std::min(best, std::hypot((p[0] - q[0]) * s.sx, (p[1] - q[1]) * s.sy, (p[2] - q[2]) * s.sz));
      }
      all.push_back(best);
    }
  };
  directed(sa, sb);
  directed(sb, sa);
  return percentile95(all);
}

inline double label_volume_cm3(const OneHotLabelMap& m, int c) {
  double n = 0;
  for (std::size_t v = 0; v < m.dims.voxels(); ++v) n += m.label(v) == c;
  return n * m.spacing.sx * m.spacing.sy * m.spacing.sz / 1000.0;
}

}  // namespace oracle

/// Random hard label map: blocky regions so every class has a surface.
inline OneHotLabelMap random_labels(Dims d, Spacing s, Rng& rng, double noise = 0.2) {
  std::vector<int> lab(d.voxels());
  const int bx = static_cast<int>(rng.uniform_int(1, 3));
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        int l = ((x / (bx + 1)) + 2 * (y / 2) + 3 * (z / 3)) % kNumClasses;
        if (rng.bernoulli(noise)) l = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
        lab[d.index(x, y, z)] = l;
      }
  return one_hot_from_indices(d, s, lab);
}

inline Dims random_small_dims(Rng& rng) {
  return {static_cast<int>(rng.uniform_int(3, 8)), static_cast<int>(rng.uniform_int(3, 8)),
          static_cast<int>(rng.uniform_int(3, 8))};
}

inline bool same_or_both_nan(double a, double b, double tol) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::abs(a - b) <= tol;
}

// ---------------------------------------------------------------------------
// Metric oracles

inline Volume3D box_blur(const Volume3D& in) {
  Volume3D out = in;
  const Dims d = in.dims;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double s = 0;
        int n = 0;
        for (int c = -1; c <= 1; ++c)
          for (int b = -1; b <= 1; ++b)
            for (int a = -1; a <= 1; ++a) {
              const int xx = x + a, yy = y + b, zz = z + c;
              if (xx < 0 || yy < 0 || zz < 0 || xx >= d.nx || yy >= d.ny || zz >= d.nz) continue;
              s += in.at(xx, yy, zz);
              ++n;
            }
        out.at(x, y, z) = s / n;
      }
  return out;
}

inline std::vector<Check> metric_suite(int trials, std::uint64_t seed) {
  Rng rng(seed);
  constexpr double tol = 1e-10;
  double jac = 0, defn = 0, efc_err = 0, dsc_err = 0, hd_err = 0, vol_err = 0;
  for (int t = 0; t < trials; ++t) {
    const Dims d = random_small_dims(rng);
    const Spacing s{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    VectorField3D u(d, s);
    for (auto& v : u.data) v = rng.uniform(-1, 1);
    const Volume3D det = jacobian_det(u);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          jac = std::max(jac, std::abs(det.at(x, y, z) - oracle::jacobian_at(u, x, y, z)));
        }
    defn = std::max(defn, std::abs(deformation_norm(u) - oracle::deformation_norm(u)) / oracle::deformation_norm(u));

    Volume3D img(d, s);
    for (auto& v : img.data) v = rng.uniform();
    efc_err = std::max(efc_err, std::abs(efc(img) - oracle::efc(img.data)));

    const auto a = random_labels(d, s, rng), b = random_labels(d, s, rng);
    const auto ds = dsc(a, b);
    const auto hd = hd95(a, b, s);
    const auto vol = label_volume(a);
    for (int c = 1; c < kNumClasses; ++c) {
      const double od = oracle::dsc(a, b, c), oh = oracle::hd95(a, b, c, s);
      dsc_err = std::max(dsc_err, same_or_both_nan(ds.value[c - 1], od, tol) ? 0.0 : 1.0);
      hd_err = std::max(hd_err, same_or_both_nan(hd.value[c - 1], oh, tol) ? 0.0 : 1.0);
      vol_err = std::max(vol_err, std::abs(vol[c - 1] - oracle::label_volume_cm3(a, c)));
    }
  }

  // EFC anchors and blur monotonicity.
  const Dims d{8, 8, 8};
  Volume3D flat(d, {}, 0.5);
  Volume3D spike(d, {}, 0.0);
  spike.data[100] = 1.0;
  int blur_ok = 0;
  const int blur_trials = 20;
  for (int t = 0; t < blur_trials; ++t) {
    Volume3D img(d, {});
    for (auto& v : img.data) v = rng.uniform() < 0.3 ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.1);
    blur_ok += efc(box_blur(img)) > efc(img);
  }

  std::vector<Check> out;
  out.push_back(at_most("jacobian determinant vs oracle", jac, tol));
  out.push_back(at_most("deformation norm vs oracle", defn, tol));
  out.push_back(at_most("EFC vs oracle", efc_err, tol));
  out.push_back(at_most("DSC vs oracle (mismatches)", dsc_err, 0.0));
  out.push_back(at_most("HD95 vs oracle (mismatches)", hd_err, 0.0));
  out.push_back(at_most("label volume vs oracle", vol_err, tol));
  out.push_back(at_most("EFC constant image = 1", std::abs(efc(flat) - 1.0), 1e-9));
  out.push_back(at_most("EFC single spike = 0", std::abs(efc(spike)), 1e-9));
  out.push_back(at_least("EFC increases under blur (of 20)", blur_ok, 19));
  return out;
}

// ---------------------------------------------------------------------------
// Diffeomorphic integration

struct DiffeoStats {
  double min_positive_fraction = 1.0;
  double max_inverse_error = 0.0;
  double max_translation_error = 0.0;
};

inline DiffeoStats diffeo_stats(int fields, std::uint64_t seed, int steps = 7) {
  Rng rng(seed);
  const Dims d{16, 16, 16};
  DiffeoStats st;
  for (int f = 0; f < fields; ++f) {
    const double max_abs = rng.uniform(0.5, 2.0);
    const Tensor v = smooth_field(d, rng, max_abs);
    const VectorField3D vf = to_field(v, {}, FieldKind::velocity);
    const VectorField3D u = integrate_velocity(vf, steps);
    const VectorField3D ui = integrate_velocity(negate(vf), steps);
    const Tensor ut = to_tensor(u), uit = to_tensor(ui);
    std::size_t n = 0, pos = 0;
    for (int z = 1; z < d.nz - 1; ++z)
      for (int y = 1; y < d.ny - 1; ++y)
        for (int x = 1; x < d.nx - 1; ++x) {
          ++n;
          pos += oracle::jacobian_at(u, x, y, z) > 0.0;
          const std::size_t i = d.index(x, y, z);
          const double px = x + ut.channel(0)[i], py = y + ut.channel(1)[i], pz = z + ut.channel(2)[i];
          double e2 = 0;
          for (int c = 0; c < 3; ++c) {
            const double w = ut.channel(c)[i] + oracle::sample(uit, c, px, py, pz);
            e2 += w * w;
          }
          st.max_inverse_error = std::max(st.max_inverse_error, std::sqrt(e2));
        }
    st.min_positive_fraction = std::min(st.min_positive_fraction, static_cast<double>(pos) / static_cast<double>(n));
  }

  // Constant velocity: the flow is a pure translation by c. Reference is
  // explicit Euler with 1024 steps on the sampled field.
  for (int t = 0; t < 5; ++t) {
    const double c[3] = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    Tensor v = Tensor::feature(3, d);
    for (int k = 0; k < 3; ++k) std::fill(v.channel(k), v.channel(k) + d.voxels(), c[k]);
    const VectorField3D u = integrate_velocity(to_field(v, {}, FieldKind::velocity), steps);
    for (int z = 4; z < 12; z += 3)
      for (int y = 4; y < 12; y += 3)
        for (int x = 4; x < 12; x += 3) {
          double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
          for (int s = 0; s < 1024; ++s) {
            double step[3];
            for (int k = 0; k < 3; ++k) step[k] = oracle::sample(v, k, p[0], p[1], p[2]) / 1024.0;
            for (int k = 0; k < 3; ++k) p[k] += step[k];
          }
          const std::size_t i = d.index(x, y, z);
          st.max_translation_error = std::max({st.max_translation_error, std::abs(u.at(0, i) - (p[0] - x)),
                                               std::abs(u.at(1, i) - (p[1] - y)), std::abs(u.at(2, i) - (p[2] - z))});
        }
  }
  return st;
}

inline std::vector<Check> diffeo_suite(int fields, std::uint64_t seed) {
  const auto st = diffeo_stats(fields, seed);
  return {at_least("positive Jacobian fraction (worst field)", st.min_positive_fraction, 1.0),
          at_most("inverse consistency max error (voxels)", st.max_inverse_error, 0.05),
          at_most("constant field vs 1024-step Euler", st.max_translation_error, 1e-6)};
}

// ---------------------------------------------------------------------------
// File formats

inline std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

template <class E, class Fn>
std::optional<decltype(std::declval<E>().code())> error_code_of(Fn fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.code();
  } catch (...) {
  }
  return std::nullopt;
}

inline bool vvol_round_trip(const AnyVolume& v, const std::filesystem::path& p) {
  write_vvol(p, v);
  const auto bytes = file_bytes(p);
  const AnyVolume back = read_vvol(p);
  const auto p2 = p.string() + ".2";
  write_vvol(p2, back);
  if (file_bytes(p2) != bytes) return false;
  const auto& a = std::visit([](const auto& x) -> const std::vector<double>& { return x.data; }, v);
  const auto& b = std::visit([](const auto& x) -> const std::vector<double>& { return x.data; }, back);
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (static_cast<double>(static_cast<float>(a[i])) != b[i]) return false;
  }
  return true;
}

inline bool is_text_column(const std::string& name) {
  for (const char* t : {"path", "split", "subject", "label", "series", "metric"}) {
    if (name == t) return true;
  }
  return false;
}

/// Every row has the header's field count and every numeric column parses
/// in full (empty fields are missing values).
inline bool csv_strict_ok(const std::filesystem::path& p) {
  try {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    const auto rows = csv::parse(ss.str());
    if (rows.size() < 2) return false;
    for (std::size_t k = 1; k < rows.size(); ++k) {
      if (rows[k].size() != rows[0].size()) return false;
      for (std::size_t c = 0; c < rows[k].size(); ++c) {
        const std::string& f = rows[k][c];
        if (f.empty() || is_text_column(rows[0][c])) continue;
        double v = 0;
        const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
        if (res.ec != std::errc() || res.ptr != f.data() + f.size()) return false;
      }
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

inline std::vector<Check> format_suite(const std::filesystem::path& dir, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Check> out;
  const Dims d{4, 5, 6};
  const Spacing s{1.0, 1.25, 0.5};

  Volume3D img(d, s);
  for (auto& v : img.data) v = rng.uniform();
  OneHotLabelMap lab = random_labels(d, s, rng);
  VectorField3D fld(d, s);
  for (auto& v : fld.data) v = rng.uniform(-3, 3);
  out.push_back(holds("vvol scalar round-trip", vvol_round_trip(img, dir / "img.vvol")));
  out.push_back(holds("vvol one-hot round-trip", vvol_round_trip(lab, dir / "lab.vvol")));
  out.push_back(holds("vvol vector round-trip", vvol_round_trip(fld, dir / "fld.vvol")));

  VectorField3D small({3, 3, 3}, {});
  for (std::size_t v = 0; v < 27; ++v) {
    small.at(0, v) = 0.5;
    small.at(1, v) = -0.5;
  }
  write_vvol(dir / "small.vvol", small);
  // magic + five u32 + three f32 spacings + payload
  const std::uintmax_t expected = 8 + 5 * 4 + 3 * 4 + 3 * 27 * 4;
  out.push_back(holds("vvol 3x3x3 vector field size from layout", std::filesystem::file_size(dir / "small.vvol") == expected));

  auto bytes = file_bytes(dir / "img.vvol");
  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / "bad_magic.vvol", bad);
  auto trunc = bytes;
  trunc.resize(trunc.size() - 3);
  write_bytes(dir / "trunc.vvol", trunc);
  auto lb = file_bytes(dir / "lab.vvol");
  // Corrupt the first channel value of voxel 0 so its sum is not 1.
  const float two = 2.0f;
  std::memcpy(lb.data() + 40, &two, 4);
  write_bytes(dir / "badsum.vvol", lb);
  const auto c1 = error_code_of<VvolError>([&] { read_vvol(dir / "bad_magic.vvol"); });
  const auto c2 = error_code_of<VvolError>([&] { read_vvol(dir / "trunc.vvol"); });
  const auto c3 = error_code_of<VvolError>([&] { read_vvol(dir / "badsum.vvol"); });
  out.push_back(holds("vvol distinct errors: bad magic / truncated / invariant",
                      c1 == VvolErrorCode::bad_magic && c2 == VvolErrorCode::truncated &&
                          c3 == VvolErrorCode::invariant));

  const TrainConfig cfg = small_config(true);
  ParamStore ps = init_params(cfg.arch, 7);
  set_meta(ps, "epoch", 3);
  save_checkpoint(ps, dir / "ck.atlf");
  bool ck_ok = false;
  try {
    const ParamStore back = load_checkpoint(dir / "ck.atlf", param_layout(cfg.arch));
    save_checkpoint(back, dir / "ck2.atlf");
    ck_ok = file_bytes(dir / "ck.atlf") == file_bytes(dir / "ck2.atlf") && meta_value(back, "epoch") == 3;
    for (const auto& [name, t] : ps) {
      if (name.rfind(std::string(kMetaPrefix), 0) == 0) continue;
      const Tensor& b = back.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) ck_ok = ck_ok && static_cast<double>(static_cast<float>(t[i])) == b[i];
    }
  } catch (const std::exception&) {
    ck_ok = false;
  }
  out.push_back(holds("checkpoint round-trip", ck_ok));
  TrainConfig other = cfg;
  other.arch.gen_widths = {8, 6, 5};
  auto ckb = file_bytes(dir / "ck.atlf");
  ckb.resize(ckb.size() / 2);
  write_bytes(dir / "ck_trunc.atlf", ckb);
  auto ckm = file_bytes(dir / "ck.atlf");
  ckm[1] = 'x';
  write_bytes(dir / "ck_magic.atlf", ckm);
  const auto k1 = error_code_of<CheckpointError>([&] { load_checkpoint(dir / "ck.atlf", param_layout(other.arch)); });
  const auto k2 = error_code_of<CheckpointError>([&] { load_checkpoint(dir / "ck_trunc.atlf", param_layout(cfg.arch)); });
  const auto k3 = error_code_of<CheckpointError>([&] { load_checkpoint(dir / "ck_magic.atlf", param_layout(cfg.arch)); });
  out.push_back(holds("checkpoint distinct errors: shape / truncated / magic",
                      k1 == CheckpointErrorCode::shape_mismatch && k2 == CheckpointErrorCode::truncated &&
                          k3 == CheckpointErrorCode::bad_magic));

  // CSV outputs of a tiny end-to-end pipeline.
  DatasetOptions dopt;
  dopt.n_train = 4;
  dopt.n_test = 2;
  dopt.seed = seed;
  dopt.spec.dims = cfg.arch.dims;
  const Manifest m = make_dataset(dir / "data", dopt);
  TrainConfig tc = cfg;
  tc.schedule.epochs = 1;
  tc.schedule.batch = 2;
  tc.schedule.disc_steps = 1;
  FitOptions fo;
  fo.out_dir = dir / "run";
  const FitResult fr = fit(tc, m, fo);
  const EvalReport rep = evaluate(fr.params, tc, m, "test");
  write_report(rep, dir / "report.csv");
  const auto traj = trajectory_analysis(fr.params, tc, m, 1);
  write_trajectory_report(traj, tc, dir / "traj");
  out.push_back(holds("manifest.csv strict parse", csv_strict_ok(dir / "data" / kManifestName) &&
                                                       read_manifest(dir / "data").entries.size() == 6));
  out.push_back(holds("train_log.csv strict parse", csv_strict_ok(dir / "run" / kLogName)));
  out.push_back(holds("report csv strict parse", csv_strict_ok(dir / "report.csv") &&
                                                     csv_strict_ok(dir / "report_summary.csv") &&
                                                     csv_strict_ok(dir / "report_radar.csv")));
  out.push_back(holds("trajectory csv strict parse", csv_strict_ok(dir / "traj" / "trajectory.csv") &&
                                                         csv_strict_ok(dir / "traj" / "trajectory_summary.csv")));
  bool rejects = true;
  for (const char* text : {"a,b\n1\n", "a,b\n\"1,2\n", "a,b\n1,2,3\n"}) {
    try {
      csv::parse(text);
      rejects = false;
    } catch (const csv::CsvError&) {
    }
  }
  out.push_back(holds("strict CSV reader rejects malformed input", rejects));
  return out;
}

}  // namespace testing_support
