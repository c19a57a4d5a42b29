#pragma once

// Synthetic conditional phantoms: nested star-shaped shells whose size and
// folding amplitude grow with the condition.

#include <condatlas/dataset.hpp>
#include <condatlas/rng.hpp>
#include <condatlas/volume.hpp>
#include <condatlas/vvol_io.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

namespace condatlas {

struct PhantomSpec {
  Dims dims{24, 24, 24};
  Spacing spacing{1.0, 1.0, 1.0};
  // Outer radius of each tissue as a fraction of the local brain radius,
  // innermost first: BS, dGM, Ven, tWM, cGM, eCSF.
  std::array<double, kNumTissues> layer_fraction{0.32, 0.47, 0.60, 0.74, 0.87, 1.0};
  double radius_base = 0.25;    // r(a) = (radius_base + radius_growth * a) * nx
  double radius_growth = 0.15;
  double fold_amplitude = 0.08;  // A(a) = fold_amplitude * a * nx
  int fold_frequency = 6;
  double radius_jitter = 0.05;   // relative, uniform
  double center_jitter = 1.0;    // voxels, uniform per axis
  double noise_sigma = 0.03;
};

// Mean intensity per class, in channel order.
inline constexpr std::array<double, kNumClasses> kTissueIntensity{0.02, 0.85, 0.35, 0.6, 0.15, 0.45, 0.55};

// Shell order from the center outwards, as tissue channels.
inline constexpr std::array<Tissue, kNumTissues> kShellOrder{Tissue::bs,  Tissue::dgm, Tissue::ven,
                                                             Tissue::twm, Tissue::cgm, Tissue::ecsf};

struct PhantomSubject {
  Volume3D image;
  OneHotLabelMap labels;
};

namespace detail {

// Smooth noise: white Gaussian noise through one 3^3 box filter (edge
// clamped), rescaled so an interior voxel has standard deviation sigma.
inline std::vector<double> smooth_noise(Dims d, double sigma, Rng& rng) {
  std::vector<double> white(d.voxels());
  for (auto& w : white) w = rng.normal();
  std::vector<double> out(d.voxels());
  const double gain = sigma * std::sqrt(27.0) / 27.0;
  auto clampi = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double s = 0.0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              s += white[d.index(clampi(x + dx, d.nx), clampi(y + dy, d.ny), clampi(z + dz, d.nz))];
        out[d.index(x, y, z)] = gain * s;
      }
  return out;
}

}  // namespace detail

/// Deterministic in (spec, a, seed). `a` is the normalized condition.
inline PhantomSubject make_subject(const PhantomSpec& spec, double a, std::uint64_t seed) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::out_of_range("phantom: normalized condition outside [0, 1]");
  const Dims d = spec.dims;
  Rng rng(seed);
  // Subject draws happen in a fixed order that does not depend on a.
  const double scale = 1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter);
  std::array<double, 3> center{};
  for (int ax = 0; ax < 3; ++ax) {
    center[ax] = 0.5 * (d[ax] - 1) + rng.uniform(-spec.center_jitter, spec.center_jitter);
  }
  const double phase_t = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase_p = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const double base = scale * (spec.radius_base + spec.radius_growth * a) * d.nx;
  const double amp = spec.fold_amplitude * a * d.nx;
  const double k = spec.fold_frequency;

  PhantomSubject out{Volume3D(d, spec.spacing), OneHotLabelMap(d, spec.spacing)};
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double px = x - center[0], py = y - center[1], pz = z - center[2];
        const double rho = std::sqrt(px * px + py * py + pz * pz);
        const double theta = rho > 0 ? std::acos(std::clamp(pz / rho, -1.0, 1.0)) : 0.0;
        const double phi = std::atan2(py, px);
        const double radius = base + amp * std::sin(k * theta + phase_t) * std::sin(k * phi + phase_p);
        int label = static_cast<int>(Tissue::background);
        for (int s = 0; s < kNumTissues; ++s) {
          if (rho < spec.layer_fraction[s] * radius) {
            label = static_cast<int>(kShellOrder[s]);
            break;
          }
        }
        const std::size_t v = d.index(x, y, z);
        out.labels.set_hard(v, label);
        out.image.data[v] = kTissueIntensity[label];
      }
  const auto noise = detail::smooth_noise(d, spec.noise_sigma, rng);
  for (std::size_t v = 0; v < noise.size(); ++v) out.image.data[v] = std::clamp(out.image.data[v] + noise[v], 0.0, 1.0);
  return out;
}

enum class ConditionDistribution { uniform, imbalanced };

struct DatasetOptions {
  int n_train = 64;
  int n_test = 16;
  std::uint64_t seed = 1;
  double raw_min = 21.0;
  double raw_max = 37.0;
  ConditionDistribution distribution = ConditionDistribution::uniform;
  bool test_two_per_bin = true;
  PhantomSpec spec;
};

/// Integer test conditions, two subjects each, spread evenly over the range.
inline std::vector<double> two_per_bin_conditions(int n_test, double raw_min, double raw_max) {
  std::vector<double> out;
  const int bins = (n_test + 1) / 2;
  for (int b = 0; b < bins; ++b) {
    const double t = bins == 1 ? 0.5 : static_cast<double>(b) / (bins - 1);
    const double raw = std::round(raw_min + t * (raw_max - raw_min));
    for (int r = 0; r < 2 && static_cast<int>(out.size()) < n_test; ++r) out.push_back(raw);
  }
  return out;
}

/// Writes <dir>/{train,test}/subj_NNN_{img,lab}.vvol and <dir>/manifest.csv.
inline Manifest make_dataset(const std::filesystem::path& dir, const DatasetOptions& opt) {
  if (opt.n_train < 0 || opt.n_test < 0) throw std::invalid_argument("subject counts must be non-negative");
  if (!(opt.raw_max > opt.raw_min)) throw std::invalid_argument("raw_max must exceed raw_min");
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "test");
  Rng cond_rng(derive_seed(opt.seed, hash_name("conditions")));
  const double span = opt.raw_max - opt.raw_min;

  std::vector<double> train_raw(opt.n_train);
  for (auto& r : train_raw) {
    const double u = cond_rng.uniform();
    // Imbalanced: density falls linearly towards raw_max, so late bins are rare.
    const double t = opt.distribution == ConditionDistribution::uniform ? u : 1.0 - std::sqrt(1.0 - u);
    r = opt.raw_min + t * span;
  }
  std::vector<double> test_raw;
  if (opt.test_two_per_bin) {
    test_raw = two_per_bin_conditions(opt.n_test, opt.raw_min, opt.raw_max);
  } else {
    for (int i = 0; i < opt.n_test; ++i) test_raw.push_back(opt.raw_min + cond_rng.uniform() * span);
  }

  Manifest m;
  m.root = dir;
  auto emit = [&](const std::string& split, const std::vector<double>& raws, std::uint64_t tag) {
    for (std::size_t i = 0; i < raws.size(); ++i) {
      ManifestEntry e;
      char name[32];
      std::snprintf(name, sizeof name, "subj_%03zu", i);
      e.path = split + "/" + name + std::string(kImageSuffix);
      e.a_raw = raws[i];
      e.a_norm = (raws[i] - opt.raw_min) / span;
      e.seed = derive_seed(opt.seed, tag + i);
      e.split = split;
      const auto subj = make_subject(opt.spec, e.a_norm, e.seed);
      write_vvol(dir / e.path, subj.image);
      write_vvol(dir / label_path_for(e.path), subj.labels);
      m.entries.push_back(std::move(e));
    }
  };
  emit("train", train_raw, 0x10000);
  emit("test", test_raw, 0x20000);
  write_manifest(dir, m.entries);
  return m;
}

}  // namespace condatlas
