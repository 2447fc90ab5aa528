#pragma once

// Difference-of-models codec: per-weight model differences, decimal scalar
// quantization, model compensation, and the "DRP1" delta packet.
//
// Packet layout, all integers little-endian:
//   magic "DRP1", format version u8 (= 1)
//   base id         u16 + UTF-8, u64 version (kNoVersion for a whole model)
//   target id       u16 + UTF-8, u64 version
//   params          s_bits u8, q_bits u8, f f64, rounding u8 (= 1)
//   layer_count     u32
//   directory       per layer: name (u16 + UTF-8), rank u8, dims u64 x rank,
//                   payload_length u64
//   payloads        concatenated in directory order
//   checksum        u64, weight_checksum() of the reconstructed model
//
// Payload grammar per layer, repeated until product(dims) values are emitted:
//   0x00 varint(n)  -> n zeros (n >= 1)
//   varint(v)       -> zigzag_decode(v), v != 0
// Zeros are always emitted as runs, so a value token never starts with 0x00.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "retina/bytes.hpp"
#include "retina/error.hpp"
#include "retina/model.hpp"

namespace retina {

enum class Rounding : std::uint8_t { HalfAwayFromZero = 1 };

inline constexpr int kMaxSBits = 15;

/// Exact powers of ten; every entry up to 1e15 is representable in a double.
inline double pow10_exact(int e) {
  static constexpr std::array<double, kMaxSBits + 1> table = {1e0, 1e1, 1e2,  1e3,  1e4,  1e5,  1e6,  1e7,
                                                              1e8, 1e9, 1e10, 1e11, 1e12, 1e13, 1e14, 1e15};
  return table.at(static_cast<std::size_t>(e));
}

class QuantizationParams {
 public:
  QuantizationParams(int s_bits, int q_bits, double f, Rounding rounding = Rounding::HalfAwayFromZero)
      : s_bits_(s_bits), q_bits_(q_bits), f_(f), rounding_(rounding) {
    if (q_bits_ < 0 || s_bits_ < q_bits_) fail(ErrorCode::InvalidArgument, "need 0 <= q_bits <= s_bits");
    if (s_bits_ > kMaxSBits) fail(ErrorCode::InvalidArgument, "s_bits must be <= 15");
    if (!(std::fabs(f_) < 0.5)) fail(ErrorCode::InvalidArgument, "|f| must be < 0.5");
    if (rounding_ != Rounding::HalfAwayFromZero) fail(ErrorCode::InvalidArgument, "unsupported rounding mode");
  }

  /// s_bits = 12 and f = 0.3 are the reference settings; q_bits picks the level.
  static QuantizationParams with_compression_bits(int compression_bits, int s_bits = 12, double f = 0.3) {
    return QuantizationParams(s_bits, s_bits - compression_bits, f);
  }

  int s_bits() const { return s_bits_; }
  int q_bits() const { return q_bits_; }
  double f() const { return f_; }
  Rounding rounding() const { return rounding_; }
  int compression_bits() const { return s_bits_ - q_bits_; }

  /// 10^(s_bits - q_bits), exact.
  double scale() const { return pow10_exact(compression_bits()); }
  /// Worst-case |dequantize(quantize(w)) - w| in exact arithmetic.
  double error_bound() const { return (0.5 + std::fabs(f_)) / scale(); }

  friend bool operator==(const QuantizationParams&, const QuantizationParams&) = default;

 private:
  int s_bits_;
  int q_bits_;
  double f_;
  Rounding rounding_;
};

inline constexpr double kQuantLimit = 4611686018427387904.0;  // 2^62

/// round_half_away_from_zero(w * 10^(s_bits - q_bits) + f), evaluated in that
/// order in double precision.
inline std::int64_t quantize_weight(double w, const QuantizationParams& p) {
  if (!std::isfinite(w)) fail(ErrorCode::NonFiniteWeight, "cannot quantize a non-finite weight");
  const double scaled = w * p.scale();
  if (!(std::fabs(scaled) + std::fabs(p.f()) < kQuantLimit)) fail(ErrorCode::Overflow, "quantized value exceeds 2^62");
  return static_cast<std::int64_t>(std::round(scaled + p.f()));
}

/// q * 10^(q_bits - s_bits). Divides by the exact power of ten so the result is
/// the correctly rounded value. The offset f is not removed.
inline double dequantize_weight(std::int64_t q, const QuantizationParams& p) {
  return static_cast<double>(q) / p.scale();
}

struct DeltaLayer {
  std::string name;
  Shape shape;
  std::vector<double> values;
  friend bool operator==(const DeltaLayer&, const DeltaLayer&) = default;
};

struct DeltaModel {
  ModelVersionId base;
  ModelVersionId target;
  std::vector<DeltaLayer> layers;

  std::vector<std::pair<std::string, Shape>> layout() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& l : layers) out.emplace_back(l.name, l.shape);
    return out;
  }
};

struct QuantizedLayer {
  std::string name;
  Shape shape;
  std::vector<std::int64_t> values;
  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedDelta {
  QuantizationParams params;
  ModelVersionId base;
  ModelVersionId target;
  std::vector<QuantizedLayer> layers;

  friend bool operator==(const QuantizedDelta&, const QuantizedDelta&) = default;

  std::vector<std::pair<std::string, Shape>> layout() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& l : layers) out.emplace_back(l.name, l.shape);
    return out;
  }
  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.values.size();
    return n;
  }
};

inline DeltaModel compute_dom(const ModelArtifact& target, const ModelArtifact& base) {
  if (!architecture_compatible(target, base))
    fail(ErrorCode::ArchitectureMismatch, target.id().str() + " vs " + base.id().str());
  DeltaModel d{base.id(), target.id(), {}};
  d.layers.reserve(target.layers().size());
  for (std::size_t h = 0; h < target.layers().size(); ++h) {
    const auto& t = target.layers()[h];
    const auto& b = base.layers()[h];
    DeltaLayer layer{t.name(), t.shape(), std::vector<double>(t.size())};
    for (std::size_t i = 0; i < t.size(); ++i)
      layer.values[i] = static_cast<double>(t.data()[i]) - static_cast<double>(b.data()[i]);
    d.layers.push_back(std::move(layer));
  }
  return d;
}

inline QuantizedDelta quantize(const DeltaModel& d, const QuantizationParams& p) {
  QuantizedDelta q{p, d.base, d.target, {}};
  q.layers.reserve(d.layers.size());
  for (const auto& l : d.layers) {
    QuantizedLayer ql{l.name, l.shape, std::vector<std::int64_t>(l.values.size())};
    for (std::size_t i = 0; i < l.values.size(); ++i) ql.values[i] = quantize_weight(l.values[i], p);
    q.layers.push_back(std::move(ql));
  }
  return q;
}

inline DeltaModel dequantize(const QuantizedDelta& q) {
  DeltaModel d{q.base, q.target, {}};
  d.layers.reserve(q.layers.size());
  for (const auto& l : q.layers) {
    DeltaLayer dl{l.name, l.shape, std::vector<double>(l.values.size())};
    for (std::size_t i = 0; i < l.values.size(); ++i) dl.values[i] = dequantize_weight(l.values[i], q.params);
    d.layers.push_back(std::move(dl));
  }
  return d;
}

/// base + delta in double precision, narrowed to f32. The result carries the
/// delta's target id; its parent is the delta's base unless that is kNoVersion.
inline ModelArtifact compensate(const DeltaModel& delta_hat, const ModelArtifact& base) {
  const auto layout = delta_hat.layout();
  if (architecture_digest(layout) != base.digest())
    fail(ErrorCode::ArchitectureMismatch, "delta layout does not match " + base.id().str());
  std::vector<WeightTensor> layers;
  layers.reserve(layout.size());
  for (std::size_t h = 0; h < delta_hat.layers.size(); ++h) {
    const auto& dl = delta_hat.layers[h];
    const auto bw = base.layers()[h].data();
    std::vector<float> out(bw.size());
    for (std::size_t i = 0; i < bw.size(); ++i)
      out[i] = static_cast<float>(dl.values[i] + static_cast<double>(bw[i]));
    layers.emplace_back(dl.name, dl.shape, std::move(out));
  }
  std::optional<std::uint64_t> parent;
  if (delta_hat.base.version != kNoVersion) parent = delta_hat.base.version;
  return ModelArtifact(delta_hat.target.model_id, delta_hat.target.version, parent, std::move(layers));
}

/// The "without difference" arm: the whole model quantized against an
/// implicit all-zero base.
inline QuantizedDelta whole_model_quantize(const ModelArtifact& m, const QuantizationParams& p) {
  DeltaModel d{{m.model_id(), kNoVersion}, m.id(), {}};
  for (const auto& l : m.layers()) {
    DeltaLayer dl{l.name(), l.shape(), std::vector<double>(l.size())};
    for (std::size_t i = 0; i < l.size(); ++i) dl.values[i] = static_cast<double>(l.data()[i]);
    d.layers.push_back(std::move(dl));
  }
  return quantize(d, p);
}

// ---------------------------------------------------------------------------
// Payload stream

inline Bytes encode_layer_payload(std::span<const std::int64_t> values) {
  Bytes out;
  out.reserve(values.size() / 4 + 8);
  std::size_t i = 0;
  while (i < values.size()) {
    if (values[i] == 0) {
      std::size_t j = i;
      while (j < values.size() && values[j] == 0) ++j;
      out.push_back(0x00);
      put_varint(out, j - i);
      i = j;
    } else {
      put_varint(out, zigzag_encode(values[i]));
      ++i;
    }
  }
  return out;
}

inline std::vector<std::int64_t> decode_layer_payload(ByteView payload, std::uint64_t count) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, payload.size() * 64ULL + 1)));
  std::size_t pos = 0;
  while (out.size() < count) {
    if (pos >= payload.size())
      fail(ErrorCode::LengthMismatch, "payload ends after " + std::to_string(out.size()) + " of " + std::to_string(count) + " values");
    if (payload[pos] == 0x00) {
      ++pos;
      const std::uint64_t run = read_varint(payload, pos);
      if (run == 0) fail(ErrorCode::MalformedVarint, "zero-length run");
      if (run > count - out.size()) fail(ErrorCode::LengthMismatch, "run overshoots layer length");
      out.resize(out.size() + static_cast<std::size_t>(run), 0);
    } else {
      out.push_back(zigzag_decode(read_varint(payload, pos)));
    }
  }
  if (pos != payload.size()) fail(ErrorCode::LengthMismatch, "trailing bytes after " + std::to_string(count) + " values");
  return out;
}

// ---------------------------------------------------------------------------
// Packet

inline constexpr std::uint8_t kPacketMagic[4] = {'D', 'R', 'P', '1'};
inline constexpr std::uint8_t kPacketFormatVersion = 1;

struct PacketLayer {
  std::string name;
  Shape shape;
  Bytes payload;
  friend bool operator==(const PacketLayer&, const PacketLayer&) = default;
};

struct DeltaPacket {
  std::uint8_t format_version = kPacketFormatVersion;
  ModelVersionId base;
  ModelVersionId target;
  QuantizationParams params;
  std::vector<PacketLayer> layers;
  std::uint64_t checksum = 0;

  friend bool operator==(const DeltaPacket&, const DeltaPacket&) = default;

  bool is_whole_model() const { return base.version == kNoVersion; }

  std::uint64_t layout_digest() const {
    std::vector<std::pair<std::string, Shape>> layout;
    for (const auto& l : layers) layout.emplace_back(l.name, l.shape);
    return architecture_digest(layout);
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(shape_product(l.shape));
    return n;
  }

  std::size_t payload_bytes() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.payload.size();
    return n;
  }

  /// All-zero model with the packet's layout, the base of a whole-model packet.
  ModelArtifact zero_base() const {
    std::vector<WeightTensor> zs;
    for (const auto& l : layers) zs.push_back(WeightTensor::zeros(l.name, l.shape));
    return ModelArtifact(target.model_id, target.version, std::nullopt, std::move(zs));
  }
};

inline DeltaPacket encode_packet(const QuantizedDelta& qd, const ModelArtifact& base) {
  if (architecture_digest(qd.layout()) != base.digest())
    fail(ErrorCode::ArchitectureMismatch, "quantized delta does not match " + base.id().str());
  DeltaPacket pkt{kPacketFormatVersion, qd.base, qd.target, qd.params, {}, 0};
  pkt.layers.reserve(qd.layers.size());
  for (const auto& l : qd.layers) pkt.layers.push_back({l.name, l.shape, encode_layer_payload(l.values)});
  pkt.checksum = weight_checksum(compensate(dequantize(qd), base));
  return pkt;
}

inline QuantizedDelta decode_packet(const DeltaPacket& pkt) {
  if (pkt.format_version != kPacketFormatVersion) fail(ErrorCode::BadHeader, "unsupported packet format version");
  QuantizedDelta qd{pkt.params, pkt.base, pkt.target, {}};
  qd.layers.reserve(pkt.layers.size());
  for (const auto& l : pkt.layers) {
    const std::uint64_t n = shape_product(l.shape);
    qd.layers.push_back({l.name, l.shape, decode_layer_payload(l.payload, n)});
  }
  return qd;
}

inline std::size_t packet_size(const DeltaPacket& pkt) {
  std::size_t n = 4 + 1 + (2 + pkt.base.model_id.size() + 8) + (2 + pkt.target.model_id.size() + 8) + (1 + 1 + 8 + 1) + 4;
  for (const auto& l : pkt.layers) n += 2 + l.name.size() + 1 + 8 * l.shape.size() + 8 + l.payload.size();
  return n + 8;
}

inline Bytes serialize_packet(const DeltaPacket& pkt) {
  ByteWriter w;
  w.reserve(packet_size(pkt));
  w.raw(kPacketMagic);
  w.u8(pkt.format_version);
  w.str(pkt.base.model_id);
  w.u64(pkt.base.version);
  w.str(pkt.target.model_id);
  w.u64(pkt.target.version);
  w.u8(static_cast<std::uint8_t>(pkt.params.s_bits()));
  w.u8(static_cast<std::uint8_t>(pkt.params.q_bits()));
  w.f64(pkt.params.f());
  w.u8(static_cast<std::uint8_t>(pkt.params.rounding()));
  w.u32(static_cast<std::uint32_t>(pkt.layers.size()));
  for (const auto& l : pkt.layers) {
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.shape.size()));
    for (auto d : l.shape) w.u64(d);
    w.u64(l.payload.size());
  }
  for (const auto& l : pkt.layers) w.raw(l.payload);
  w.u64(pkt.checksum);
  return w.take();
}

inline DeltaPacket deserialize_packet(ByteView bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPacketMagic, 4) != 0) fail(ErrorCode::BadMagic, "not a DRP1 packet");
  ByteReader r(bytes.subspan(4), ErrorCode::BadHeader);
  const std::uint8_t format = r.u8();
  if (format != kPacketFormatVersion) fail(ErrorCode::BadHeader, "unsupported packet format version " + std::to_string(format));
  ModelVersionId base;
  base.model_id = r.str();
  base.version = r.u64();
  ModelVersionId target;
  target.model_id = r.str();
  target.version = r.u64();
  const int s_bits = r.u8();
  const int q_bits = r.u8();
  const double f = r.f64();
  const std::uint8_t rounding = r.u8();
  std::optional<QuantizationParams> params;
  try {
    params.emplace(s_bits, q_bits, f, static_cast<Rounding>(rounding));
  } catch (const Error& e) {
    fail(ErrorCode::BadHeader, std::string("invalid quantization params: ") + e.what());
  }
  const std::uint32_t layer_count = r.u32();
  std::vector<PacketLayer> layers;
  std::vector<std::uint64_t> lengths;
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    PacketLayer l;
    l.name = r.str();
    l.shape.resize(r.u8());
    for (auto& d : l.shape) d = r.u64();
    try {
      shape_product(l.shape);
    } catch (const Error& e) {
      fail(ErrorCode::BadHeader, e.what());
    }
    const std::uint64_t len = r.u64();
    if (len > r.remaining() || total + len > r.remaining()) fail(ErrorCode::TruncatedPayload, "directory exceeds packet size");
    total += len;
    lengths.push_back(len);
    layers.push_back(std::move(l));
  }
  if (r.remaining() < total + 8) fail(ErrorCode::TruncatedPayload, "payloads truncated");
  if (r.remaining() > total + 8) fail(ErrorCode::BadHeader, "unexpected bytes after payloads");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ByteView p = r.take(static_cast<std::size_t>(lengths[i]));
    layers[i].payload.assign(p.begin(), p.end());
  }
  const std::uint64_t checksum = r.u64();
  return DeltaPacket{format, std::move(base), std::move(target), *params, std::move(layers), checksum};
}

/// Receiver side: decode, dequantize, compensate against `base` and verify the
/// checksum. Whole-model packets ignore `base` and use the zero model.
inline ModelArtifact apply_packet(const DeltaPacket& pkt, const ModelArtifact* base) {
  std::optional<ModelArtifact> zero;
  if (pkt.is_whole_model()) {
    zero.emplace(pkt.zero_base());
    base = &*zero;
  } else {
    if (base == nullptr) fail(ErrorCode::BaseMismatch, "packet needs base " + pkt.base.str());
    if (base->id() != pkt.base) fail(ErrorCode::BaseMismatch, "packet base " + pkt.base.str() + ", given " + base->id().str());
  }
  if (pkt.layout_digest() != base->digest()) fail(ErrorCode::BaseMismatch, "architecture of base differs from packet");
  ModelArtifact out = compensate(dequantize(decode_packet(pkt)), *base);
  if (weight_checksum(out) != pkt.checksum) fail(ErrorCode::ChecksumMismatch, "reconstruction of " + pkt.target.str() + " failed verification");
  return out;
}

inline DeltaPacket diff_packet(const ModelArtifact& target, const ModelArtifact& base, const QuantizationParams& p) {
  return encode_packet(quantize(compute_dom(target, base), p), base);
}

inline DeltaPacket whole_model_packet(const ModelArtifact& m, const QuantizationParams& p) {
  return encode_packet(whole_model_quantize(m, p), m.zeros_like());
}

// ---------------------------------------------------------------------------
// Size accounting

struct SizeReport {
  std::uint64_t baseline_bytes = 0;
  std::uint64_t packet_bytes = 0;
  std::uint64_t payload_bytes = 0;
  double compression_ratio = 0.0;
  double entropy_bits_per_weight = 0.0;
};

/// Order-0 Shannon entropy (bits per symbol) of the value distribution.
inline double order0_entropy(const QuantizedDelta& qd) {
  std::unordered_map<std::int64_t, std::uint64_t> freq;
  std::uint64_t total = 0;
  for (const auto& l : qd.layers)
    for (auto v : l.values) {
      ++freq[v];
      ++total;
    }
  if (total == 0) return 0.0;
  // sorted summation keeps the result independent of hash iteration order
  std::vector<std::uint64_t> counts;
  counts.reserve(freq.size());
  for (const auto& [v, c] : freq) counts.push_back(c);
  std::sort(counts.begin(), counts.end());
  double h = 0.0;
  for (auto c : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h == 0.0 ? 0.0 : h;
}

inline SizeReport size_report(const DeltaPacket& pkt, std::uint64_t weight_count) {
  if (weight_count == 0) fail(ErrorCode::InvalidArgument, "weight_count must be positive");
  SizeReport r;
  r.baseline_bytes = 4 * weight_count;
  r.packet_bytes = packet_size(pkt);
  r.payload_bytes = pkt.payload_bytes();
  r.compression_ratio = static_cast<double>(r.baseline_bytes) / static_cast<double>(r.packet_bytes);
  r.entropy_bits_per_weight = order0_entropy(decode_packet(pkt));
  return r;
}

}  // namespace retina
