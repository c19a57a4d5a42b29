#pragma once

// .vvol volume container.
//
// Layout (all little-endian):
//   8 bytes   magic "VVOL0001"
//   u32       kind (0 = scalar, 1 = one-hot, 2 = vector)
//   u32       channels (1, 7 or 3)
//   u32 x3    nx, ny, nz
//   f32 x3    spacing sx, sy, sz (mm)
//   f32 ...   channels * nx * ny * nz values, channel-major, x fastest

#include <condatlas/binary_io.hpp>
#include <condatlas/volume.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace condatlas {

enum class VvolErrorCode { io, bad_magic, bad_kind, bad_header, truncated, invariant };

class VvolError : public std::runtime_error {
 public:
  VvolError(VvolErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  VvolErrorCode code() const { return code_; }

 private:
  VvolErrorCode code_;
};

inline constexpr char kVvolMagic[9] = "VVOL0001";

using AnyVolume = std::variant<Volume3D, OneHotLabelMap, VectorField3D>;

namespace detail {

inline std::vector<unsigned char> vvol_header(std::uint32_t kind, std::uint32_t channels, Dims d,
                                              Spacing s) {
  std::vector<unsigned char> buf;
  buf.reserve(8 + 20 + 12 + channels * d.voxels() * 4);
  binio::put_bytes(buf, std::string(kVvolMagic, 8));
  binio::put_u32(buf, kind);
  binio::put_u32(buf, channels);
  binio::put_u32(buf, static_cast<std::uint32_t>(d.nx));
  binio::put_u32(buf, static_cast<std::uint32_t>(d.ny));
  binio::put_u32(buf, static_cast<std::uint32_t>(d.nz));
  binio::put_f32(buf, static_cast<float>(s.sx));
  binio::put_f32(buf, static_cast<float>(s.sy));
  binio::put_f32(buf, static_cast<float>(s.sz));
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& buf) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw VvolError(VvolErrorCode::io, "cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw VvolError(VvolErrorCode::io, "write failed: " + path.string());
}

inline void check_geometry(Dims d, Spacing s, std::size_t values, std::size_t channels) {
  if (!d.valid()) throw VvolError(VvolErrorCode::invariant, "dims must be positive");
  if (!s.valid()) throw VvolError(VvolErrorCode::invariant, "spacing must be positive");
  if (values != channels * d.voxels()) {
    throw VvolError(VvolErrorCode::invariant, "data length does not match dims");
  }
}

inline void append_values(std::vector<unsigned char>& buf, const std::vector<double>& data) {
  for (double v : data) binio::put_f32(buf, static_cast<float>(v));
}

}  // namespace detail

inline void write_vvol(const std::filesystem::path& path, const Volume3D& vol) {
  detail::check_geometry(vol.dims, vol.spacing, vol.data.size(), 1);
  if (vol.is_image && !image_range_valid(vol)) {
    throw VvolError(VvolErrorCode::invariant, "image intensities outside [0, 1]");
  }
  auto buf = detail::vvol_header(0, 1, vol.dims, vol.spacing);
  detail::append_values(buf, vol.data);
  detail::write_file(path, buf);
}

inline void write_vvol(const std::filesystem::path& path, const OneHotLabelMap& m) {
  detail::check_geometry(m.dims, m.spacing, m.data.size(), kNumClasses);
  if (!label_sums_valid(m)) {
    throw VvolError(VvolErrorCode::invariant, "one-hot channel sums differ from 1");
  }
  auto buf = detail::vvol_header(1, kNumClasses, m.dims, m.spacing);
  detail::append_values(buf, m.data);
  detail::write_file(path, buf);
}

inline void write_vvol(const std::filesystem::path& path, const VectorField3D& f) {
  detail::check_geometry(f.dims, f.spacing, f.data.size(), 3);
  auto buf = detail::vvol_header(2, 3, f.dims, f.spacing);
  detail::append_values(buf, f.data);
  detail::write_file(path, buf);
}

inline void write_vvol(const std::filesystem::path& path, const AnyVolume& any) {
  std::visit([&](const auto& v) { write_vvol(path, v); }, any);
}

inline AnyVolume read_vvol(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VvolError(VvolErrorCode::io, "cannot open: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  binio::Reader rd(buf);
  std::string magic;
  if (!rd.bytes(8, magic)) throw VvolError(VvolErrorCode::truncated, "truncated header: " + path.string());
  if (magic != std::string(kVvolMagic, 8)) {
    throw VvolError(VvolErrorCode::bad_magic, "bad magic in " + path.string());
  }
  std::uint32_t kind = 0, channels = 0, nx = 0, ny = 0, nz = 0;
  float sx = 0, sy = 0, sz = 0;
  if (!(rd.u32(kind) && rd.u32(channels) && rd.u32(nx) && rd.u32(ny) && rd.u32(nz) && rd.f32(sx) &&
        rd.f32(sy) && rd.f32(sz))) {
    throw VvolError(VvolErrorCode::truncated, "truncated header: " + path.string());
  }
  static constexpr std::uint32_t kChannels[3] = {1, kNumClasses, 3};
  if (kind > 2) throw VvolError(VvolErrorCode::bad_kind, "unknown kind " + std::to_string(kind));
  if (channels != kChannels[kind]) {
    throw VvolError(VvolErrorCode::bad_header, "channel count does not match kind");
  }
  if (nx == 0 || ny == 0 || nz == 0 || nx > (1u << 15) || ny > (1u << 15) || nz > (1u << 15)) {
    throw VvolError(VvolErrorCode::bad_header, "invalid dims");
  }
  const Dims d{static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)};
  const Spacing s{sx, sy, sz};
  if (!s.valid()) throw VvolError(VvolErrorCode::invariant, "spacing must be positive");

  const std::size_t count = channels * d.voxels();
  if (rd.remaining() < count * 4) {
    throw VvolError(VvolErrorCode::truncated, "truncated payload: " + path.string());
  }
  if (rd.remaining() > count * 4) {
    throw VvolError(VvolErrorCode::bad_header, "trailing bytes after payload: " + path.string());
  }
  std::vector<double> values(count);
  for (auto& v : values) {
    float f = 0;
    rd.f32(f);
    v = f;
  }

  switch (kind) {
    case 0: {
      Volume3D vol;
      vol.dims = d;
      vol.spacing = s;
      vol.data = std::move(values);
      vol.is_image = image_range_valid(vol);
      return vol;
    }
    case 1: {
      OneHotLabelMap m;
      m.dims = d;
      m.spacing = s;
      m.data = std::move(values);
      if (!label_sums_valid(m)) {
        throw VvolError(VvolErrorCode::invariant, "one-hot channel sums differ from 1");
      }
      return m;
    }
    default: {
      VectorField3D f;
      f.dims = d;
      f.spacing = s;
      f.data = std::move(values);
      return f;
    }
  }
}

/// Reads a scalar intensity volume and enforces the [0, 1] image range.
inline Volume3D read_image(const std::filesystem::path& path) {
  auto any = read_vvol(path);
  auto* vol = std::get_if<Volume3D>(&any);
  if (vol == nullptr) throw VvolError(VvolErrorCode::bad_kind, "expected scalar volume: " + path.string());
  if (!vol->is_image) throw VvolError(VvolErrorCode::invariant, "image intensities outside [0, 1]");
  return std::move(*vol);
}

inline OneHotLabelMap read_labels(const std::filesystem::path& path) {
  auto any = read_vvol(path);
  auto* m = std::get_if<OneHotLabelMap>(&any);
  if (m == nullptr) throw VvolError(VvolErrorCode::bad_kind, "expected one-hot map: " + path.string());
  return std::move(*m);
}

}  // namespace condatlas
