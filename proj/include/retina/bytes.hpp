#pragma once

// Little-endian byte buffers, FNV-1a-64, LEB128 varints and zig-zag mapping.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retina/error.hpp"

namespace retina {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

class Fnv1a64 {
 public:
  void update(ByteView bytes) {
    for (std::uint8_t b : bytes) {
      state_ ^= b;
      state_ *= kFnvPrime;
    }
  }
  void update(std::uint8_t b) {
    state_ ^= b;
    state_ *= kFnvPrime;
  }
  void update_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) update(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void update(std::string_view s) {
    for (char c : s) update(static_cast<std::uint8_t>(c));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = kFnvOffset;
};

inline std::uint64_t fnv1a64(ByteView bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.digest();
}

constexpr std::uint64_t zigzag_encode(std::int64_t n) {
  return (static_cast<std::uint64_t>(n) << 1) ^ static_cast<std::uint64_t>(n >> 63);
}

constexpr std::int64_t zigzag_decode(std::uint64_t v) {
  return static_cast<std::int64_t>(v >> 1) ^ -static_cast<std::int64_t>(v & 1);
}

constexpr std::size_t varint_length(std::uint64_t v) {
  std::size_t n = 1;
  while (v >= 0x80) {
    v >>= 7;
    ++n;
  }
  return n;
}

inline void put_varint(Bytes& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(ByteView bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  // u16 length prefix + UTF-8 bytes
  void str(std::string_view s) {
    if (s.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  void reserve(std::size_t n) { buf_.reserve(n); }
  std::size_t size() const { return buf_.size(); }
  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes buf_;
};

/// Bounds-checked cursor. Running off the end raises `short_code`.
class ByteReader {
 public:
  explicit ByteReader(ByteView data, ErrorCode short_code = ErrorCode::TruncatedPayload)
      : data_(data), short_code_(short_code) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    const std::size_t n = u16();
    ByteView s = take(n);
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }

  ByteView take(std::size_t n) {
    need(n);
    ByteView out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  void need(std::size_t n) const {
    if (n > remaining()) fail(short_code_, "needed " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left");
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  ByteView data_;
  std::size_t pos_ = 0;
  ErrorCode short_code_;
};

/// Reads one LEB128 value starting at `pos`; rejects truncation and values
/// wider than 64 bits.
inline std::uint64_t read_varint(ByteView data, std::size_t& pos) {
  std::uint64_t value = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    if (pos >= data.size()) fail(ErrorCode::MalformedVarint, "stream ends inside varint");
    const std::uint8_t byte = data[pos++];
    const std::uint64_t bits = byte & 0x7F;
    if (shift == 63 && bits > 1) fail(ErrorCode::MalformedVarint, "varint exceeds 64 bits");
    value |= bits << shift;
    if ((byte & 0x80) == 0) return value;
  }
  fail(ErrorCode::MalformedVarint, "varint longer than 10 bytes");
}

}  // namespace retina
