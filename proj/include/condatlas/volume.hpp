#pragma once

// Core grid types shared by every module: scalar volumes, one-hot label
// maps, vector fields and the normalized condition.
//
// All grids are stored row-major with x fastest. Multi-channel grids are
// channel-major: element (c, x, y, z) lives at c * N + (z * ny + y) * nx + x.

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace condatlas {

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(ny) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(nx) +
           static_cast<std::size_t>(x);
  }
  bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
  int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

/// Millimeters per voxel along each axis.
struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;

  double voxel_volume_mm3() const { return sx * sy * sz; }
  double operator[](int axis) const { return axis == 0 ? sx : (axis == 1 ? sy : sz); }
  bool valid() const { return sx > 0 && sy > 0 && sz > 0; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

inline constexpr int kNumClasses = 7;
inline constexpr int kNumTissues = 6;

// Fixed channel order of every label map.
enum class Tissue : int { background = 0, ecsf = 1, cgm = 2, twm = 3, ven = 4, dgm = 5, bs = 6 };

inline constexpr std::array<std::string_view, kNumClasses> kTissueNames{
    "background", "eCSF", "cGM", "tWM", "Ven", "dGM", "BS"};

/// Scalar grid. `is_image` marks intensity volumes whose values must lie
/// in [0, 1]; feature maps and derived quantities (e.g. Jacobians) clear it.
struct Volume3D {
  Dims dims;
  Spacing spacing;
  std::vector<double> data;
  bool is_image = true;

  Volume3D() = default;
  Volume3D(Dims d, Spacing s, double fill = 0.0, bool image = true)
      : dims(d), spacing(s), data(d.voxels(), fill), is_image(image) {}

  double& at(int x, int y, int z) { return data[dims.index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
};

/// Per-voxel distribution over the seven classes, channel-major.
struct OneHotLabelMap {
  Dims dims;
  Spacing spacing;
  std::vector<double> data;

  OneHotLabelMap() = default;
  OneHotLabelMap(Dims d, Spacing s) : dims(d), spacing(s), data(d.voxels() * kNumClasses, 0.0) {}

  double& at(int channel, std::size_t voxel) { return data[channel * dims.voxels() + voxel]; }
  double at(int channel, std::size_t voxel) const {
    return data[channel * dims.voxels() + voxel];
  }

  /// Hard label of a voxel (lowest channel wins ties).
  int label(std::size_t voxel) const {
    int best = 0;
    double best_v = at(0, voxel);
    for (int c = 1; c < kNumClasses; ++c) {
      if (at(c, voxel) > best_v) {
        best_v = at(c, voxel);
        best = c;
      }
    }
    return best;
  }
  void set_hard(std::size_t voxel, int label) {
    for (int c = 0; c < kNumClasses; ++c) at(c, voxel) = (c == label) ? 1.0 : 0.0;
  }
};

enum class FieldKind { velocity, displacement };

/// Per-voxel 3-vector in voxel units, component-major (ux block, uy block, uz block).
struct VectorField3D {
  Dims dims;
  Spacing spacing;
  FieldKind kind = FieldKind::displacement;
  std::vector<double> data;

  VectorField3D() = default;
  VectorField3D(Dims d, Spacing s, FieldKind k = FieldKind::displacement)
      : dims(d), spacing(s), kind(k), data(d.voxels() * 3, 0.0) {}

  double& at(int component, std::size_t voxel) { return data[component * dims.voxels() + voxel]; }
  double at(int component, std::size_t voxel) const {
    return data[component * dims.voxels() + voxel];
  }
};

/// Gestational-age-like scalar and its [0, 1] normalization.
struct Condition {
  double raw = 0.0;
  double normalized = 0.0;

  static Condition from_raw(double raw, double raw_min, double raw_max) {
    if (!(raw_max > raw_min)) throw std::invalid_argument("condition bounds: raw_max must exceed raw_min");
    if (!(raw >= raw_min && raw <= raw_max)) {
      throw std::out_of_range("condition " + std::to_string(raw) + " outside [" +
                              std::to_string(raw_min) + ", " + std::to_string(raw_max) + "]");
    }
    return {raw, (raw - raw_min) / (raw_max - raw_min)};
  }
  static Condition from_normalized(double a, double raw_min, double raw_max) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::out_of_range("normalized condition outside [0, 1]");
    return {raw_min + a * (raw_max - raw_min), a};
  }
};

inline bool label_sums_valid(const OneHotLabelMap& m, double tol = 1e-5) {
  const std::size_t n = m.dims.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
      const double p = m.at(c, v);
      if (!(p >= 0.0)) return false;
      s += p;
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

inline bool image_range_valid(const Volume3D& v) {
  for (double x : v.data) {
    if (!(x >= 0.0 && x <= 1.0)) return false;
  }
  return true;
}

/// Hardens a soft map: one channel set to 1 per voxel, ties to the lowest index.
inline OneHotLabelMap argmax_labels(const OneHotLabelMap& m) {
  OneHotLabelMap out(m.dims, m.spacing);
  const std::size_t n = m.dims.voxels();
  for (std::size_t v = 0; v < n; ++v) out.set_hard(v, m.label(v));
  return out;
}

/// Hard label indices, one per voxel.
inline std::vector<int> label_indices(const OneHotLabelMap& m) {
  std::vector<int> out(m.dims.voxels());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = m.label(v);
  return out;
}

inline OneHotLabelMap one_hot_from_indices(Dims d, Spacing s, const std::vector<int>& labels) {
  if (labels.size() != d.voxels()) throw std::invalid_argument("label count does not match dims");
  OneHotLabelMap out(d, s);
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (labels[v] < 0 || labels[v] >= kNumClasses) throw std::out_of_range("label index out of range");
    out.set_hard(v, labels[v]);
  }
  return out;
}

}  // namespace condatlas
