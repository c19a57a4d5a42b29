#pragma once

// Named parameter collection and the ATLF0001 checkpoint format.
//
// Checkpoint layout (little-endian):
//   8 bytes  magic "ATLF0001"
//   u32      parameter count
//   per parameter: u32 name length, name bytes, u32 rank, rank x u32
//                  extents, f32 payload (row-major)

#include <condatlas/binary_io.hpp>
#include <condatlas/tensor.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace condatlas {

class ParamStore {
 public:
  ParamStore() = default;

  Tensor& add(const std::string& name, std::vector<int> shape, double fill = 0.0) {
    auto [it, inserted] = params_.emplace(name, Tensor(std::move(shape), fill));
    if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
    return it->second;
  }
  void set(const std::string& name, Tensor value) { params_[name] = std::move(value); }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  std::uint64_t seed = 0;

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

enum class CheckpointErrorCode { io, bad_magic, truncated, shape_mismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  CheckpointErrorCode code() const { return code_; }

 private:
  CheckpointErrorCode code_;
};

inline constexpr char kCheckpointMagic[9] = "ATLF0001";

/// Entries under this prefix carry training counters, not weights.
inline constexpr std::string_view kMetaPrefix = "meta.";

inline void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
  std::vector<unsigned char> buf;
  binio::put_bytes(buf, std::string(kCheckpointMagic, 8));
  binio::put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    binio::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    binio::put_bytes(buf, name);
    binio::put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (int e : t.shape()) binio::put_u32(buf, static_cast<std::uint32_t>(e));
    for (double v : t.values()) binio::put_f32(buf, static_cast<float>(v));
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointErrorCode::io, "cannot open for writing: " + tmp);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw CheckpointError(CheckpointErrorCode::io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorCode::io, "cannot move checkpoint into place: " + ec.message());
}

/// Reads a checkpoint without any architecture check.
inline ParamStore load_checkpoint_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointErrorCode::io, "cannot open: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  binio::Reader rd(buf);
  std::string magic;
  if (!rd.bytes(8, magic)) throw CheckpointError(CheckpointErrorCode::truncated, "truncated checkpoint");
  if (magic != std::string(kCheckpointMagic, 8)) {
    throw CheckpointError(CheckpointErrorCode::bad_magic, "bad checkpoint magic in " + path.string());
  }
  std::uint32_t count = 0;
  if (!rd.u32(count)) throw CheckpointError(CheckpointErrorCode::truncated, "truncated checkpoint");
  ParamStore ps;
  for (std::uint32_t p = 0; p < count; ++p) {
    std::uint32_t len = 0, rank = 0;
    std::string name;
    if (!rd.u32(len) || len > rd.remaining() || !rd.bytes(len, name) || !rd.u32(rank) || rank > 8) {
      throw CheckpointError(CheckpointErrorCode::truncated, "truncated checkpoint entry");
    }
    std::vector<int> shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      std::uint32_t v = 0;
      if (!rd.u32(v)) throw CheckpointError(CheckpointErrorCode::truncated, "truncated checkpoint shape");
      if (v == 0 || v > (1u << 24)) throw CheckpointError(CheckpointErrorCode::shape_mismatch, "invalid extent");
      e = static_cast<int>(v);
      n *= v;
    }
    if (n * 4 > rd.remaining()) throw CheckpointError(CheckpointErrorCode::truncated, "truncated payload: " + name);
    std::vector<double> data(n);
    for (auto& v : data) {
      float f = 0;
      rd.f32(f);
      v = f;
    }
    if (ps.contains(name)) throw CheckpointError(CheckpointErrorCode::shape_mismatch, "duplicate entry: " + name);
    ps.set(name, Tensor(std::move(shape), std::move(data)));
  }
  if (rd.remaining() != 0) throw CheckpointError(CheckpointErrorCode::truncated, "trailing bytes in checkpoint");
  return ps;
}

/// Reads a checkpoint and checks every weight against `layout` (same names,
/// same shapes). Meta entries are passed through.
inline ParamStore load_checkpoint(const std::filesystem::path& path, const ParamStore& layout) {
  ParamStore ps = load_checkpoint_raw(path);
  for (const auto& [name, t] : layout) {
    if (!ps.contains(name)) throw CheckpointError(CheckpointErrorCode::shape_mismatch, "missing parameter: " + name);
    if (ps.at(name).shape() != t.shape()) {
      throw CheckpointError(CheckpointErrorCode::shape_mismatch,
                            "shape mismatch for " + name + ": checkpoint " + shape_string(ps.at(name).shape()) +
                                ", architecture " + shape_string(t.shape()));
    }
  }
  for (const auto& [name, _] : ps) {
    if (name.rfind(kMetaPrefix, 0) != 0 && !layout.contains(name)) {
      throw CheckpointError(CheckpointErrorCode::shape_mismatch, "parameter not in architecture: " + name);
    }
  }
  return ps;
}

inline double meta_value(const ParamStore& ps, const std::string& key, double fallback = 0.0) {
  const std::string name = std::string(kMetaPrefix) + key;
  return ps.contains(name) ? ps.at(name)[0] : fallback;
}

inline void set_meta(ParamStore& ps, const std::string& key, double value) {
  ps.set(std::string(kMetaPrefix) + key, Tensor::scalar(value));
}

}  // namespace condatlas
