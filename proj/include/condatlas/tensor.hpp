#pragma once

// Dense f64 tensor with an explicit row-major shape. Feature maps use the
// rank-4 shape {channels, nz, ny, nx} so x is fastest and channels are
// outermost; parameters use whatever shape their operator expects.

#include <condatlas/volume.hpp>

#include <algorithm>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace condatlas {

/// Cache-line aligned allocator. Vectorized reductions peel elements up to
/// the first aligned address, so a fixed base alignment keeps their
/// summation order, and hence results, independent of where memory lands.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<int> shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != count(shape_)) throw std::invalid_argument("tensor data does not match shape");
  }

  static Tensor feature(int channels, Dims d, double fill = 0.0) {
    return Tensor({channels, d.nz, d.ny, d.nx}, fill);
  }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  AlignedBuffer& values() { return data_; }
  const AlignedBuffer& values() const { return data_; }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool is_feature() const { return shape_.size() == 4; }
  int channels() const { return shape_.at(0); }
  Dims dims() const {
    if (!is_feature()) throw std::logic_error("tensor is not a feature map");
    return {shape_[3], shape_[2], shape_[1]};
  }
  std::size_t voxels() const { return dims().voxels(); }
  double* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * voxels(); }
  const double* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * voxels(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int s : shape) {
      if (s <= 0) throw std::invalid_argument("tensor extents must be positive");
      n *= static_cast<std::size_t>(s);
    }
    return n;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<int> shape_;
  AlignedBuffer data_;
};

inline std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline Tensor to_tensor(const Volume3D& v) { return Tensor({1, v.dims.nz, v.dims.ny, v.dims.nx}, v.data); }
inline Tensor to_tensor(const OneHotLabelMap& m) {
  return Tensor({kNumClasses, m.dims.nz, m.dims.ny, m.dims.nx}, m.data);
}
inline Tensor to_tensor(const VectorField3D& f) { return Tensor({3, f.dims.nz, f.dims.ny, f.dims.nx}, f.data); }

inline Volume3D to_volume(const Tensor& t, Spacing s, bool is_image = true) {
  if (!t.is_feature() || t.channels() != 1) throw std::invalid_argument("expected single-channel tensor");
  Volume3D v;
  v.dims = t.dims();
  v.spacing = s;
  v.data.assign(t.values().begin(), t.values().end());
  v.is_image = is_image;
  return v;
}
inline OneHotLabelMap to_labels(const Tensor& t, Spacing s) {
  if (!t.is_feature() || t.channels() != kNumClasses) throw std::invalid_argument("expected 7-channel tensor");
  OneHotLabelMap m;
  m.dims = t.dims();
  m.spacing = s;
  m.data.assign(t.values().begin(), t.values().end());
  return m;
}
inline VectorField3D to_field(const Tensor& t, Spacing s, FieldKind kind) {
  if (!t.is_feature() || t.channels() != 3) throw std::invalid_argument("expected 3-channel tensor");
  VectorField3D f;
  f.dims = t.dims();
  f.spacing = s;
  f.kind = kind;
  f.data.assign(t.values().begin(), t.values().end());
  return f;
}

}  // namespace condatlas
