#pragma once

// Adversarial training: Adam, balanced condition sampling, discriminator
// augmentation, generator/registration and discriminator steps, and fit().

#include <condatlas/config.hpp>
#include <condatlas/dataset.hpp>
#include <condatlas/losses.hpp>
#include <condatlas/nets.hpp>
#include <condatlas/params.hpp>
#include <condatlas/rng.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace condatlas {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  long long step = 0;
};

/// One Adam update of every parameter that has a gradient in `grads`.
inline void adam_step(ParamStore& params, const GradStore& grads, AdamState& st, double lr, const AdamConfig& c) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!p.same_shape(g)) {
      throw std::invalid_argument("adam: gradient shape " + shape_string(g.shape()) + " does not match parameter " +
                                  name + " " + shape_string(p.shape()));
    }
    auto [mi, _m] = st.m.try_emplace(name, g.shape(), 0.0);
    auto [vi, _v] = st.v.try_emplace(name, g.shape(), 0.0);
    auto& m = mi->second.values();
    auto& v = vi->second.values();
    auto& th = p.values();
    const auto& gv = g.values();
    for (std::size_t i = 0; i < th.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv[i] * gv[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      th[i] -= lr * mh / (std::sqrt(vh) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Balanced sampling over 1-unit condition bins.

class BalancedSampler {
 public:
  BalancedSampler(const std::vector<double>& a_raw, bool balanced) : n_(a_raw.size()), balanced_(balanced) {
    if (a_raw.empty()) throw std::invalid_argument("sampler: no subjects");
    for (std::size_t i = 0; i < a_raw.size(); ++i) bins_[condition_bin(a_raw[i])].push_back(i);
    for (const auto& [_, members] : bins_) order_.push_back(&members);
  }

  /// Draws one subject index: a bin uniformly, then a member uniformly.
  std::size_t draw(Rng& rng) const {
    if (!balanced_) return static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(n_) - 1));
    const auto& members = *order_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(order_.size()) - 1))];
    return members[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(members.size()) - 1))];
  }

  /// Batch for a given step; the same (seed, step) always gives the same batch.
  std::vector<std::size_t> batch(std::uint64_t step_seed, int size) const {
    Rng rng(step_seed);
    std::vector<std::size_t> out(static_cast<std::size_t>(size));
    for (auto& i : out) i = draw(rng);
    return out;
  }

  std::size_t bin_count() const { return bins_.size(); }

 private:
  std::size_t n_;
  bool balanced_;
  std::map<long long, std::vector<std::size_t>> bins_;
  std::vector<const std::vector<std::size_t>*> order_;
};

// ---------------------------------------------------------------------------
// Discriminator input augmentation: per-axis flip (p = 0.5), then an integer
// translation in [-2, 2] per axis with border-clamp fill.

struct AugmentDraw {
  bool flip[3] = {false, false, false};
  int shift[3] = {0, 0, 0};
};

inline constexpr int kMaxAugmentShift = 2;

inline AugmentDraw draw_augment(Rng& rng) {
  AugmentDraw d;
  for (int ax = 0; ax < 3; ++ax) d.flip[ax] = rng.bernoulli(0.5);
  for (int ax = 0; ax < 3; ++ax) d.shift[ax] = static_cast<int>(rng.uniform_int(-kMaxAugmentShift, kMaxAugmentShift));
  return d;
}

/// out(x) = flipped(clamp(x - shift)) for every channel of a feature map.
inline Tensor apply_augment(const Tensor& x, const AugmentDraw& a) {
  const Dims d = x.dims();
  Tensor out(x.shape());
  auto src_coord = [](int o, int n, bool flip, int shift) {
    int c = std::clamp(o - shift, 0, n - 1);
    return flip ? n - 1 - c : c;
  };
  for (int c = 0; c < x.channels(); ++c) {
    const double* s = x.channel(c);
    double* o = out.channel(c);
    for (int z = 0; z < d.nz; ++z) {
      const int sz = src_coord(z, d.nz, a.flip[2], a.shift[2]);
      for (int y = 0; y < d.ny; ++y) {
        const int sy = src_coord(y, d.ny, a.flip[1], a.shift[1]);
        for (int xx = 0; xx < d.nx; ++xx) {
          o[d.index(xx, y, z)] = s[d.index(src_coord(xx, d.nx, a.flip[0], a.shift[0]), sy, sz)];
        }
      }
    }
  }
  return out;
}

inline Volume3D disc_augment(const Volume3D& x, std::uint64_t seed) {
  Rng rng(seed);
  return to_volume(apply_augment(to_tensor(x), draw_augment(rng)), x.spacing, x.is_image);
}

// ---------------------------------------------------------------------------
// Steps

struct StepLosses {
  double img = 0.0;
  double seg = 0.0;
  double reg = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;
  double total = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results keep index order.
template <class R, class Fn>
std::vector<R> parallel_map(std::size_t n, int threads, Fn fn) {
  std::vector<R> out(n);
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) out[i] = fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline void accumulate(GradStore& dst, const GradStore& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, g);
    } else {
      auto& d = it->second.values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g.values()[i];
    }
  }
}

struct SampleResult {
  StepLosses losses;
  GradStore grads;
};

}  // namespace detail

/// Generator + registration objective for one subject. Gradients (scaled by
/// `seed`) go to generator and registration parameters only.
inline detail::SampleResult g_sample(const Subject& subj, const ParamStore& ps, const TrainConfig& cfg, double seed) {
  const ArchConfig& arch = cfg.arch;
  const LossWeights& w = cfg.weights;
  const double a = subj.entry.a_norm;
  Tape t;
  ParamBinder p(t, ps, true, true, false);
  TemplateVars tmpl = generator_forward(p, arch, a);
  Var s = t.leaf(to_tensor(subj.image));
  Var sl = t.leaf(to_tensor(subj.labels));
  Var v = registration_forward(p, arch, tmpl.image, s);
  Var u = ad::integrate_ss(v, arch.int_steps);
  Var ui = ad::integrate_ss(ad::scale(v, -1.0), arch.int_steps);
  Var limg = ad::loss_img(ad::warp(tmpl.image, u), s, ad::warp(s, ui), tmpl.image, cfg.ncc_window);
  Var lseg = ad::mse(ad::warp(sl, ui), tmpl.labels);
  Var lreg = ad::loss_reg(u, w.def, w.grad);
  std::vector<std::pair<double, Var>> terms{{w.img, limg}, {w.seg, lseg}, {1.0, lreg}};
  detail::SampleResult r;
  if (cfg.disc_enabled()) {
    Var ladv = ad::adv_g(discriminator_forward(p, arch, tmpl.image, a), cfg.adversarial);
    terms.emplace_back(w.disc, ladv);
    r.losses.adv_g = ladv.value()[0];
  }
  Var total = ad::weighted_sum(terms);
  r.losses.img = limg.value()[0];
  r.losses.seg = lseg.value()[0];
  r.losses.reg = lreg.value()[0];
  r.losses.total = total.value()[0];
  t.backward(total, r.grads, seed);
  return r;
}

/// Hinge (or logistic) discriminator loss for one real subject against the
/// generated template at the same condition.
inline detail::SampleResult d_sample(const Subject& subj, const ParamStore& ps, const TrainConfig& cfg, double seed,
                                     std::uint64_t aug_seed) {
  const ArchConfig& arch = cfg.arch;
  const double a = subj.entry.a_norm;
  Tensor real = to_tensor(subj.image);
  Tensor fake;
  {
    Tape gt;
    ParamBinder gp(gt, ps, false, false, false);
    fake = generator_forward(gp, arch, a).image.value();
  }
  if (cfg.disc_augment) {
    Rng rng(aug_seed);
    const AugmentDraw dr = draw_augment(rng);
    const AugmentDraw df = draw_augment(rng);
    real = apply_augment(real, dr);
    fake = apply_augment(fake, df);
  }
  Tape t;
  ParamBinder p(t, ps, false, false, true);
  Var lr = discriminator_forward(p, arch, t.leaf(std::move(real)), a);
  Var lf = discriminator_forward(p, arch, t.leaf(std::move(fake)), a);
  Var loss = cfg.adversarial == AdversarialObjective::hinge ? ad::hinge_d(lr, lf) : ad::logistic_d(lr, lf);
  detail::SampleResult r;
  r.losses.adv_d = loss.value()[0];
  r.losses.total = r.losses.adv_d;
  t.backward(loss, r.grads, seed);
  return r;
}

inline StepLosses mean_losses(const std::vector<detail::SampleResult>& rs) {
  StepLosses m;
  for (const auto& r : rs) {
    m.img += r.losses.img;
    m.seg += r.losses.seg;
    m.reg += r.losses.reg;
    m.adv_g += r.losses.adv_g;
    m.adv_d += r.losses.adv_d;
    m.total += r.losses.total;
  }
  const double n = static_cast<double>(rs.size());
  m.img /= n;
  m.seg /= n;
  m.reg /= n;
  m.adv_g /= n;
  m.adv_d /= n;
  m.total /= n;
  return m;
}

/// Batch-mean gradient of the generator/registration objective (no update).
inline GradStore g_gradients(const std::vector<const Subject*>& batch, const ParamStore& ps, const TrainConfig& cfg,
                             StepLosses* losses = nullptr) {
  const double seed = 1.0 / static_cast<double>(batch.size());
  auto rs = detail::parallel_map<detail::SampleResult>(
      batch.size(), cfg.threads, [&](std::size_t i) { return g_sample(*batch[i], ps, cfg, seed); });
  GradStore g;
  for (const auto& r : rs) detail::accumulate(g, r.grads);
  if (losses) *losses = mean_losses(rs);
  return g;
}

inline StepLosses train_step_g(const std::vector<const Subject*>& batch, ParamStore& ps, AdamState& st,
                               const TrainConfig& cfg) {
  StepLosses l;
  GradStore g = g_gradients(batch, ps, cfg, &l);
  adam_step(ps, g, st, cfg.adam.lr_gen, cfg.adam);
  return l;
}

inline StepLosses train_step_d(const std::vector<const Subject*>& batch, ParamStore& ps, AdamState& st,
                               const TrainConfig& cfg, std::uint64_t step_seed) {
  const double seed = 1.0 / static_cast<double>(batch.size());
  auto rs = detail::parallel_map<detail::SampleResult>(batch.size(), cfg.threads, [&](std::size_t i) {
    return d_sample(*batch[i], ps, cfg, seed, derive_seed(step_seed, i));
  });
  GradStore g;
  for (const auto& r : rs) detail::accumulate(g, r.grads);
  adam_step(ps, g, st, cfg.adam.lr_disc, cfg.adam);
  return mean_losses(rs);
}

// ---------------------------------------------------------------------------
// fit

struct EpochLog {
  int epoch = 0;
  StepLosses losses;
  double wall_seconds = 0.0;
};

struct FitResult {
  ParamStore params;
  int epochs_done = 0;
  long long g_steps = 0;
  long long d_steps = 0;
  std::vector<EpochLog> log;
};

inline constexpr const char* kCheckpointName = "checkpoint.atlf";
inline constexpr const char* kOptimizerName = "optimizer.atlf";
inline constexpr const char* kLogName = "train_log.csv";
inline constexpr const char* kConfigName = "config.txt";

inline const csv::Row kLogHeader{"epoch", "L_img", "L_seg", "L_reg", "L_adv_g", "L_adv_d", "wall_seconds"};

namespace detail {

inline bool finite(const StepLosses& l) {
  return std::isfinite(l.img) && std::isfinite(l.seg) && std::isfinite(l.reg) && std::isfinite(l.adv_g) &&
         std::isfinite(l.adv_d) && std::isfinite(l.total);
}

inline void save_optimizer(const AdamState& g, const AdamState& d, const std::filesystem::path& path) {
  ParamStore ps;
  for (const auto& [prefix, st] : {std::pair{"g", &g}, std::pair{"d", &d}}) {
    for (const auto& [name, t] : st->m) ps.set(std::string(prefix) + ".m." + name, t);
    for (const auto& [name, t] : st->v) ps.set(std::string(prefix) + ".v." + name, t);
    set_meta(ps, std::string(prefix) + ".step", static_cast<double>(st->step));
  }
  save_checkpoint(ps, path);
}

inline void load_optimizer(AdamState& g, AdamState& d, const std::filesystem::path& path) {
  ParamStore ps = load_checkpoint_raw(path);
  for (const auto& [key, t] : ps) {
    if (key.rfind(kMetaPrefix, 0) == 0) continue;
    AdamState& st = key[0] == 'g' ? g : d;
    const std::string name = key.substr(4);
    (key[2] == 'm' ? st.m : st.v)[name] = t;
  }
  g.step = static_cast<long long>(meta_value(ps, "g.step"));
  d.step = static_cast<long long>(meta_value(ps, "d.step"));
}

}  // namespace detail

struct FitOptions {
  std::filesystem::path out_dir;
  std::filesystem::path resume_from;  // checkpoint to continue from (empty: fresh start)
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains on the manifest's training split. Writes checkpoint, optimizer
/// state, effective config and the per-epoch log under opt.out_dir.
inline FitResult fit(const TrainConfig& cfg, const Manifest& manifest, const FitOptions& opt) {
  cfg.validate();
  const auto train = load_split(manifest, "train");
  if (train.empty()) throw std::invalid_argument("manifest has no training subjects");
  for (const auto& s : train) {
    if (!(s.image.dims == cfg.arch.dims)) {
      throw std::invalid_argument("subject " + s.entry.path + " has dims " + to_string(s.image.dims) +
                                  ", config expects " + to_string(cfg.arch.dims));
    }
  }
  std::filesystem::create_directories(opt.out_dir);
  save_config(cfg, opt.out_dir / kConfigName);

  FitResult res;
  AdamState adam_g, adam_d;
  int start_epoch = 0;
  if (!opt.resume_from.empty()) {
    res.params = load_checkpoint(opt.resume_from, param_layout(cfg.arch));
    start_epoch = static_cast<int>(meta_value(res.params, "epoch"));
    res.g_steps = static_cast<long long>(meta_value(res.params, "g_steps"));
    res.d_steps = static_cast<long long>(meta_value(res.params, "d_steps"));
    const auto opt_path = opt.resume_from.parent_path() / kOptimizerName;
    if (std::filesystem::exists(opt_path)) detail::load_optimizer(adam_g, adam_d, opt_path);
  } else {
    res.params = init_params(cfg.arch, cfg.seed);
  }
  res.params.seed = cfg.seed;

  std::vector<double> a_raw;
  for (const auto& s : train) a_raw.push_back(s.entry.a_raw);
  const BalancedSampler sampler(a_raw, cfg.balanced_sampling);
  const std::uint64_t g_stream = derive_seed(cfg.seed, hash_name("g-steps"));
  const std::uint64_t d_stream = derive_seed(cfg.seed, hash_name("d-steps"));
  auto batch_of = [&](std::uint64_t step_seed) {
    std::vector<const Subject*> b;
    for (std::size_t i : sampler.batch(step_seed, cfg.schedule.batch)) b.push_back(&train[i]);
    return b;
  };

  const auto log_path = opt.out_dir / kLogName;
  const bool append = !opt.resume_from.empty() && std::filesystem::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write training log: " + log_path.string());
  if (!append) log << csv::format_row(kLogHeader);

  auto checkpoint = [&](int epoch) {
    ParamStore out = res.params;
    set_meta(out, "epoch", epoch);
    set_meta(out, "g_steps", static_cast<double>(res.g_steps));
    set_meta(out, "d_steps", static_cast<double>(res.d_steps));
    save_checkpoint(out, opt.out_dir / kCheckpointName);
    detail::save_optimizer(adam_g, adam_d, opt.out_dir / kOptimizerName);
  };

  const int steps_per_epoch = static_cast<int>((train.size() + cfg.schedule.batch - 1) / cfg.schedule.batch);
  for (int epoch = start_epoch + 1; epoch <= cfg.schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    StepLosses sum_g, sum_d;
    long long n_d = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      if (cfg.disc_enabled()) {
        for (int k = 0; k < cfg.schedule.disc_steps; ++k) {
          const std::uint64_t seed = derive_seed(d_stream, static_cast<std::uint64_t>(res.d_steps));
          StepLosses l = train_step_d(batch_of(seed), res.params, adam_d, cfg, derive_seed(seed, 1));
          if (!detail::finite(l)) {
            throw TrainingDiverged("non-finite discriminator loss at epoch " + std::to_string(epoch) + ", D-step " +
                                   std::to_string(res.d_steps));
          }
          sum_d.adv_d += l.adv_d;
          ++n_d;
          ++res.d_steps;
        }
      }
      const std::uint64_t seed = derive_seed(g_stream, static_cast<std::uint64_t>(res.g_steps));
      StepLosses l = train_step_g(batch_of(seed), res.params, adam_g, cfg);
      if (!detail::finite(l)) {
        throw TrainingDiverged("non-finite generator loss at epoch " + std::to_string(epoch) + ", G-step " +
                               std::to_string(res.g_steps) + " (L_img " + csv::format_number(l.img) + ", L_seg " +
                               csv::format_number(l.seg) + ", L_reg " + csv::format_number(l.reg) + ")");
      }
      sum_g.img += l.img;
      sum_g.seg += l.seg;
      sum_g.reg += l.reg;
      sum_g.adv_g += l.adv_g;
      ++res.g_steps;
    }
    EpochLog e;
    e.epoch = epoch;
    e.losses.img = sum_g.img / steps_per_epoch;
    e.losses.seg = sum_g.seg / steps_per_epoch;
    e.losses.reg = sum_g.reg / steps_per_epoch;
    e.losses.adv_g = sum_g.adv_g / steps_per_epoch;
    e.losses.adv_d = n_d ? sum_d.adv_d / static_cast<double>(n_d) : 0.0;
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << csv::format_row({std::to_string(epoch), csv::format_number(e.losses.img), csv::format_number(e.losses.seg),
                            csv::format_number(e.losses.reg), csv::format_number(e.losses.adv_g),
                            csv::format_number(e.losses.adv_d), csv::format_number(e.wall_seconds)});
    log.flush();
    res.log.push_back(e);
    res.epochs_done = epoch;
    if (epoch % cfg.schedule.checkpoint_every == 0 || epoch == cfg.schedule.epochs) checkpoint(epoch);
    if (opt.on_epoch) opt.on_epoch(e);
  }
  return res;
}

}  // namespace condatlas
