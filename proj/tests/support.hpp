#pragma once

// Shared test helpers: random tensors, smooth random velocity fields,
// temporary directories and the central finite-difference gradient checker.

#include <condatlas/autodiff.hpp>
#include <condatlas/rng.hpp>
#include <condatlas/tensor.hpp>
#include <condatlas/volume.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing_support {

using namespace condatlas;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_feature(int c, Dims d, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_tensor({c, d.nz, d.ny, d.nx}, rng, lo, hi);
}

/// Smooth field from a few sine modes that vanish on the grid faces, scaled
/// so the largest component magnitude equals `max_abs` (voxels).
inline Tensor smooth_field(Dims d, Rng& rng, double max_abs, int modes = 3) {
  Tensor f = Tensor::feature(3, d);
  for (int c = 0; c < 3; ++c) {
    double* p = f.channel(c);
    for (int m = 0; m < modes; ++m) {
      const int kx = static_cast<int>(rng.uniform_int(1, 2));
      const int ky = static_cast<int>(rng.uniform_int(1, 2));
      const int kz = static_cast<int>(rng.uniform_int(1, 2));
      const double amp = rng.uniform(-1.0, 1.0);
      for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
          for (int x = 0; x < d.nx; ++x) {
            p[d.index(x, y, z)] += amp * std::sin(std::numbers::pi * kx * (x + 1) / (d.nx + 1)) *
                                   std::sin(std::numbers::pi * ky * (y + 1) / (d.ny + 1)) *
                                   std::sin(std::numbers::pi * kz * (z + 1) / (d.nz + 1));
          }
    }
  }
  double mx = 0.0;
  for (double v : f.values()) mx = std::max(mx, std::abs(v));
  if (mx > 0) {
    for (auto& v : f.values()) v *= max_abs / mx;
  }
  return f;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("condatlas_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Finite differences

/// Builds a scalar from leaves bound to the given inputs.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_scalar(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(t.leaf(in, false));
  return fn(t, vars).value()[0];
}

/// Largest |analytic - numeric| / max(1, |numeric|) over up to `max_entries`
/// randomly chosen entries of every input (all entries if smaller).
inline double gradient_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-5,
                             std::size_t max_entries = 24) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(t.leaf(in, true));
  Var out = fn(t, vars);
  t.backward(out);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = t.gradient(vars[k]);
    std::vector<std::size_t> idx(inputs[k].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_entries) {
      for (std::size_t i = 0; i < max_entries; ++i) {
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(idx.size() - i - 1)))]);
      }
      idx.resize(max_entries);
    }
    for (std::size_t i : idx) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double num = (eval_scalar(fn, plus) - eval_scalar(fn, minus)) / (2.0 * h);
      worst = std::max(worst, std::abs(g[i] - num) / std::max(1.0, std::abs(num)));
    }
  }
  return worst;
}

/// Reduces a tensor-valued op to a scalar with fixed random weights.
inline Var project(Var y, const Tensor& weights) {
  Var w = y.tape->leaf(weights, false);
  return ad::dot(y, w);
}

}  // namespace testing_support
