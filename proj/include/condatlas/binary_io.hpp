#pragma once

// Little-endian primitives shared by the .vvol and checkpoint formats.
// Byte order is fixed regardless of the host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace condatlas::binio {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::vector<unsigned char>& buf, float f) {
  put_u32(buf, std::bit_cast<std::uint32_t>(f));
}

inline void put_bytes(std::vector<unsigned char>& buf, const std::string& s) {
  buf.insert(buf.end(), s.begin(), s.end());
}

/// Bounds-checked cursor over a byte buffer. Reads past the end set `short_read`.
class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& buf) : buf_(buf) {}

  bool has(std::size_t n) const { return pos_ + n <= buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }

  bool u32(std::uint32_t& out) {
    if (!has(4)) return fail();
    out = 0;
    for (int i = 0; i < 4; ++i) out |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return true;
  }
  bool f32(float& out) {
    std::uint32_t bits = 0;
    if (!u32(bits)) return false;
    out = std::bit_cast<float>(bits);
    return true;
  }
  bool bytes(std::size_t n, std::string& out) {
    if (!has(n)) return fail();
    out.assign(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return true;
  }
  bool short_read() const { return short_; }

 private:
  bool fail() {
    short_ = true;
    return false;
  }

  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0;
  bool short_ = false;
};

}  // namespace condatlas::binio
