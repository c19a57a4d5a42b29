#pragma once

// The three networks: a FiLM-conditioned two-stream template generator, a
// U-Net registration network emitting a stationary velocity field, and a
// projection discriminator.

#include <condatlas/autodiff.hpp>
#include <condatlas/params.hpp>
#include <condatlas/rng.hpp>
#include <condatlas/volume.hpp>

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace condatlas {

struct ArchConfig {
  Dims dims{24, 24, 24};
  Spacing spacing{1.0, 1.0, 1.0};
  int gen_seed_channels = 8;
  std::vector<int> gen_widths{32, 16, 16};  // decoder levels, coarse to fine
  std::vector<int> film_hidden{32, 32};
  std::vector<int> reg_widths{16, 32, 64};   // encoder levels, fine to coarse
  std::vector<int> disc_widths{16, 32, 64};  // residual blocks
  int int_steps = 7;
  double leaky_slope = 0.2;

  void validate() const {
    if (!dims.valid() || dims.nx % 8 || dims.ny % 8 || dims.nz % 8) {
      throw std::invalid_argument("grid dims must be positive multiples of 8, got " + to_string(dims));
    }
    if (!spacing.valid()) throw std::invalid_argument("spacing must be positive");
    if (gen_widths.size() != 3 || reg_widths.size() != 3 || disc_widths.size() != 3) {
      throw std::invalid_argument("generator, registration and discriminator use exactly 3 levels");
    }
    if (film_hidden.size() != 2) throw std::invalid_argument("film_hidden needs two widths");
    auto positive = [](const std::vector<int>& v) {
      for (int x : v) if (x <= 0) return false;
      return true;
    };
    if (!positive(gen_widths) || !positive(reg_widths) || !positive(disc_widths) || !positive(film_hidden) ||
        gen_seed_channels <= 0) {
      throw std::invalid_argument("channel widths must be positive");
    }
    if (int_steps < 1) throw std::invalid_argument("int_steps must be >= 1");
  }

  /// Number of FiLM outputs: (gamma, beta) per channel, per level, per stream.
  int film_outputs() const {
    int n = 0;
    for (int w : gen_widths) n += 2 * w;
    return 2 * n;
  }
};

enum class ParamGroup { generator, registration, discriminator };

inline ParamGroup group_of(const std::string& name) {
  if (name.rfind("reg.", 0) == 0) return ParamGroup::registration;
  if (name.rfind("disc.", 0) == 0) return ParamGroup::discriminator;
  return ParamGroup::generator;  // gen.*, film.*
}

inline constexpr const char* kStreamNames[2] = {"img", "lab"};

namespace detail {

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  enum Init { glorot, zero, seed } init;
  int fan_in;
  int fan_out;
};

inline void conv_spec(std::vector<ParamSpec>& out, const std::string& prefix, int cin, int cout, int k,
                      bool zero_init = false) {
  const int k3 = k * k * k;
  out.push_back({prefix + ".w", {cout, cin, k, k, k}, zero_init ? ParamSpec::zero : ParamSpec::glorot, cin * k3,
                 cout * k3});
  out.push_back({prefix + ".b", {cout}, ParamSpec::zero, 0, 0});
}

inline void dense_spec(std::vector<ParamSpec>& out, const std::string& prefix, int in, int outw,
                       bool zero_init = false) {
  out.push_back({prefix + ".w", {outw, in}, zero_init ? ParamSpec::zero : ParamSpec::glorot, in, outw});
  out.push_back({prefix + ".b", {outw}, ParamSpec::zero, 0, 0});
}

inline std::vector<ParamSpec> param_specs(const ArchConfig& a) {
  a.validate();
  std::vector<ParamSpec> s;
  const Dims sd{a.dims.nx / 8, a.dims.ny / 8, a.dims.nz / 8};
  s.push_back({"gen.seed", {a.gen_seed_channels, sd.nz, sd.ny, sd.nx}, ParamSpec::seed, a.gen_seed_channels,
               a.gen_seed_channels});
  for (const char* stream : kStreamNames) {
    int cin = a.gen_seed_channels;
    for (std::size_t l = 0; l < a.gen_widths.size(); ++l) {
      conv_spec(s, std::string("gen.") + stream + ".l" + std::to_string(l), cin, a.gen_widths[l], 3);
      cin = a.gen_widths[l];
    }
    const int head = std::string(stream) == "img" ? 1 : kNumClasses;
    conv_spec(s, std::string("gen.") + stream + ".head", cin, head, 1);
  }
  dense_spec(s, "film.fc1", 1, a.film_hidden[0]);
  dense_spec(s, "film.fc2", a.film_hidden[0], a.film_hidden[1]);
  dense_spec(s, "film.out", a.film_hidden[1], a.film_outputs(), /*zero_init=*/true);

  const auto& rw = a.reg_widths;
  conv_spec(s, "reg.enc0", 2, rw[0], 3);
  conv_spec(s, "reg.enc1", rw[0], rw[1], 3);
  conv_spec(s, "reg.enc2", rw[1], rw[2], 3);
  conv_spec(s, "reg.dec0", rw[2] + rw[1], rw[1], 3);
  conv_spec(s, "reg.dec1", rw[1] + rw[0], rw[0], 3);
  conv_spec(s, "reg.dec2", rw[0] + 2, rw[0], 3);
  conv_spec(s, "reg.head", rw[0], 3, 3, /*zero_init=*/true);

  int cin = 1;
  for (std::size_t b = 0; b < a.disc_widths.size(); ++b) {
    const std::string p = "disc.b" + std::to_string(b);
    conv_spec(s, p + ".conv1", cin, a.disc_widths[b], 3);
    conv_spec(s, p + ".conv2", a.disc_widths[b], a.disc_widths[b], 3);
    conv_spec(s, p + ".skip", cin, a.disc_widths[b], 1);
    cin = a.disc_widths[b];
  }
  s.push_back({"disc.lin.w", {cin}, ParamSpec::zero, 0, 0});
  s.push_back({"disc.lin.b", {1}, ParamSpec::zero, 0, 0});
  s.push_back({"disc.embed.w", {cin}, ParamSpec::zero, 0, 0});
  return s;
}

}  // namespace detail

/// Zero-filled store with the architecture's names and shapes.
inline ParamStore param_layout(const ArchConfig& arch) {
  ParamStore ps;
  for (const auto& spec : detail::param_specs(arch)) ps.add(spec.name, spec.shape);
  return ps;
}

/// Seeded initialization: uniform in +-sqrt(6 / (fan_in + fan_out)); biases,
/// the FiLM output layer, the velocity head and the discriminator's output
/// layer and embedding start at zero. Each tensor draws from its own stream
/// keyed by name, so adding parameters does not perturb the others.
inline ParamStore init_params(const ArchConfig& arch, std::uint64_t seed) {
  ParamStore ps;
  ps.seed = seed;
  for (const auto& spec : detail::param_specs(arch)) {
    Tensor& t = ps.add(spec.name, spec.shape);
    if (spec.init == detail::ParamSpec::zero) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
    Rng rng(derive_seed(seed, hash_name(spec.name)));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  }
  return ps;
}

/// Binds parameters onto a tape, one leaf per name. Groups flagged trainable
/// become gradient-carrying leaves; the rest are constants.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& ps, bool grad_gen, bool grad_reg, bool grad_disc)
      : tape_(tape), ps_(ps), trainable_{grad_gen, grad_reg, grad_disc} {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool rg = trainable_[static_cast<int>(group_of(name))];
    Var v = tape_.param(name, ps_.at(name), rg);
    bound_.emplace(name, v);
    return v;
  }
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamStore& ps_;
  bool trainable_[3];
  std::map<std::string, Var> bound_;
};

struct TemplateVars {
  Var image;   // {1, ...} in (0, 1)
  Var labels;  // {7, ...} softmax over channels
};

/// Two-hidden-layer perceptron from the normalized condition to every raw
/// FiLM output, laid out stream by stream, level by level, [gamma_raw | beta].
inline Var film_mlp(ParamBinder& p, const ArchConfig& arch, double a) {
  Tape& t = p.tape();
  Var in = t.leaf(Tensor({1}, std::vector<double>{a}));
  Var h = ad::leaky_relu(ad::linear(p("film.fc1.w"), in, p("film.fc1.b")), arch.leaky_slope);
  h = ad::leaky_relu(ad::linear(p("film.fc2.w"), h, p("film.fc2.b")), arch.leaky_slope);
  return ad::linear(p("film.out.w"), h, p("film.out.b"));
}

inline TemplateVars generator_forward(ParamBinder& p, const ArchConfig& arch, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::out_of_range("generator: normalized condition outside [0, 1]");
  Var film_raw = film_mlp(p, arch, a);
  Var seed = p("gen.seed");
  Var outs[2];
  std::size_t offset = 0;
  for (int s = 0; s < 2; ++s) {
    const std::string prefix = std::string("gen.") + kStreamNames[s];
    Var h = seed;
    for (std::size_t l = 0; l < arch.gen_widths.size(); ++l) {
      const auto c = static_cast<std::size_t>(arch.gen_widths[l]);
      const std::string lp = prefix + ".l" + std::to_string(l);
      h = ad::upsample2(h);
      h = ad::conv3(h, p(lp + ".w"), p(lp + ".b"), 1);
      Var gamma = ad::add_scalar(ad::slice(film_raw, offset, c), 1.0);
      Var beta = ad::slice(film_raw, offset + c, c);
      offset += 2 * c;
      h = ad::film(h, gamma, beta);
      h = ad::leaky_relu(h, arch.leaky_slope);
    }
    outs[s] = ad::conv3(h, p(prefix + ".head.w"), p(prefix + ".head.b"), 1);
  }
  return {ad::sigmoid(outs[0]), ad::softmax_channels(outs[1])};
}

/// 3-level U-Net on the (template, subject) pair; returns the velocity field {3, ...}.
inline Var registration_forward(ParamBinder& p, const ArchConfig& arch, Var template_img, Var subject) {
  if (!(template_img.value().dims() == subject.value().dims())) {
    throw std::invalid_argument("registration: template and subject dims differ");
  }
  const double sl = arch.leaky_slope;
  Var x = ad::concat(template_img, subject);
  Var e0 = ad::leaky_relu(ad::conv3(x, p("reg.enc0.w"), p("reg.enc0.b"), 2), sl);
  Var e1 = ad::leaky_relu(ad::conv3(e0, p("reg.enc1.w"), p("reg.enc1.b"), 2), sl);
  Var e2 = ad::leaky_relu(ad::conv3(e1, p("reg.enc2.w"), p("reg.enc2.b"), 2), sl);
  Var d = ad::concat(ad::upsample2(e2), e1);
  d = ad::leaky_relu(ad::conv3(d, p("reg.dec0.w"), p("reg.dec0.b"), 1), sl);
  d = ad::concat(ad::upsample2(d), e0);
  d = ad::leaky_relu(ad::conv3(d, p("reg.dec1.w"), p("reg.dec1.b"), 1), sl);
  d = ad::concat(ad::upsample2(d), x);
  d = ad::leaky_relu(ad::conv3(d, p("reg.dec2.w"), p("reg.dec2.b"), 1), sl);
  return ad::conv3(d, p("reg.head.w"), p("reg.head.b"), 1);
}

/// Projection discriminator: residual downsampling blocks, ReLU, global sum
/// pooling, then logit = w.h + b + a * <embed, h>.
inline Var discriminator_forward(ParamBinder& p, const ArchConfig& arch, Var x, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::out_of_range("discriminator: normalized condition outside [0, 1]");
  Var h = x;
  for (std::size_t b = 0; b < arch.disc_widths.size(); ++b) {
    const std::string bp = "disc.b" + std::to_string(b);
    Var in = b == 0 ? h : ad::relu(h);
    Var m = ad::conv3(in, p(bp + ".conv1.w"), p(bp + ".conv1.b"), 1);
    m = ad::conv3(ad::relu(m), p(bp + ".conv2.w"), p(bp + ".conv2.b"), 1);
    Var skip = ad::conv3(h, p(bp + ".skip.w"), p(bp + ".skip.b"), 1);
    h = ad::avg_pool2(ad::add(m, skip));
  }
  Var feat = ad::global_sum_pool(ad::relu(h));
  Var logit = ad::add(ad::dot(p("disc.lin.w"), feat), p("disc.lin.b"));
  Var proj = ad::scale(ad::dot(p("disc.embed.w"), feat), a);
  return ad::add(logit, proj);
}

// ---------------------------------------------------------------------------
// Forward-only conveniences.

struct TemplateOutput {
  Volume3D image;
  OneHotLabelMap labels;
};

inline TemplateOutput generate_template(const ParamStore& ps, const ArchConfig& arch, double a) {
  Tape t;
  ParamBinder p(t, ps, false, false, false);
  auto out = generator_forward(p, arch, a);
  return {to_volume(out.image.value(), arch.spacing, true), to_labels(out.labels.value(), arch.spacing)};
}

inline VectorField3D predict_velocity(const ParamStore& ps, const ArchConfig& arch, const Volume3D& template_img,
                                      const Volume3D& subject) {
  if (!(template_img.dims == arch.dims) || !(subject.dims == arch.dims)) {
    throw std::invalid_argument("registration: volume dims " + to_string(subject.dims) +
                                " do not match architecture " + to_string(arch.dims));
  }
  Tape t;
  ParamBinder p(t, ps, false, false, false);
  Var v = registration_forward(p, arch, t.leaf(to_tensor(template_img)), t.leaf(to_tensor(subject)));
  return to_field(v.value(), arch.spacing, FieldKind::velocity);
}

inline double discriminator_logit(const ParamStore& ps, const ArchConfig& arch, const Volume3D& x, double a) {
  Tape t;
  ParamBinder p(t, ps, false, false, false);
  return discriminator_forward(p, arch, t.leaf(to_tensor(x)), a).value()[0];
}

/// Displacement of phi = id + u from a velocity field by scaling and squaring.
inline VectorField3D integrate_velocity(const VectorField3D& v, int steps) {
  Tape t;
  Var u = ad::integrate_ss(t.leaf(to_tensor(v)), steps);
  return to_field(u.value(), v.spacing, FieldKind::displacement);
}

inline Volume3D warp_volume(const Volume3D& img, const VectorField3D& u) {
  return to_volume(kernels::warp_forward(to_tensor(img), to_tensor(u)), img.spacing, img.is_image);
}

inline OneHotLabelMap warp_labels(const OneHotLabelMap& m, const VectorField3D& u) {
  return to_labels(kernels::warp_forward(to_tensor(m), to_tensor(u)), m.spacing);
}

inline VectorField3D negate(const VectorField3D& v) {
  VectorField3D out = v;
  for (auto& x : out.data) x = -x;
  return out;
}

}  // namespace condatlas
