#pragma once

// Canonical model representation and the "DRM1" container format.
//
// Container layout, all integers little-endian:
//   magic "DRM1"
//   model_id        u16 length + UTF-8
//   version         u64
//   parent_present  u8, then parent_version u64 when 1
//   layer_count     u32
//   per layer       name (u16 + UTF-8), rank u8, rank x u64 dims,
//                   product(dims) x f32 payload
//   trailer         FNV-1a-64 over every preceding byte

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "retina/bytes.hpp"
#include "retina/error.hpp"

namespace retina {

using Shape = std::vector<std::uint64_t>;

/// Version value meaning "no model": the implicit all-zero base used when a
/// whole model is shipped instead of a difference.
inline constexpr std::uint64_t kNoVersion = std::numeric_limits<std::uint64_t>::max();

struct ModelVersionId {
  std::string model_id;
  std::uint64_t version = 0;

  friend auto operator<=>(const ModelVersionId&, const ModelVersionId&) = default;
  friend bool operator==(const ModelVersionId&, const ModelVersionId&) = default;

  std::string str() const {
    return model_id + "@" + (version == kNoVersion ? std::string("none") : std::to_string(version));
  }
};

/// Product of dimensions; ShapeMismatch on an empty shape, a zero dimension or
/// overflow.
inline std::uint64_t shape_product(std::span<const std::uint64_t> shape) {
  if (shape.empty()) fail(ErrorCode::ShapeMismatch, "shape must have at least one dimension");
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d == 0) fail(ErrorCode::ShapeMismatch, "zero dimension");
    if (n > std::numeric_limits<std::uint64_t>::max() / d) fail(ErrorCode::ShapeMismatch, "shape product overflows");
    n *= d;
  }
  return n;
}

inline std::string shape_string(std::span<const std::uint64_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class WeightTensor {
 public:
  WeightTensor(std::string name, Shape shape, std::vector<float> data)
      : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
    if (name_.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "layer name too long");
    if (shape_.size() > 0xFF) fail(ErrorCode::ShapeMismatch, "rank exceeds 255");
    if (shape_product(shape_) != data_.size())
      fail(ErrorCode::ShapeMismatch, name_ + ": shape " + shape_string(shape_) + " vs " + std::to_string(data_.size()) + " values");
    for (float v : data_)
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteWeight, name_ + " holds a non-finite weight");
  }

  static WeightTensor zeros(std::string name, Shape shape) {
    const auto n = shape_product(shape);
    return WeightTensor(std::move(name), std::move(shape), std::vector<float>(n, 0.0f));
  }

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  std::span<const float> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  friend bool operator==(const WeightTensor& a, const WeightTensor& b) {
    if (a.name_ != b.name_ || a.shape_ != b.shape_ || a.data_.size() != b.data_.size()) return false;
    // bit-exact, so -0.0f and 0.0f differ
    return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
  }

 private:
  std::string name_;
  Shape shape_;
  std::vector<float> data_;
};

/// FNV-1a-64 over, per layer, the UTF-8 name, a 0x00 separator and each
/// dimension as 8 little-endian bytes.
inline std::uint64_t architecture_digest(std::span<const std::pair<std::string, Shape>> layout) {
  Fnv1a64 h;
  for (const auto& [name, shape] : layout) {
    h.update(std::string_view(name));
    h.update(std::uint8_t{0});
    for (std::uint64_t d : shape) h.update_u64(d);
  }
  return h.digest();
}

class ModelArtifact {
 public:
  ModelArtifact(std::string model_id, std::uint64_t version, std::optional<std::uint64_t> parent_version,
                std::vector<WeightTensor> layers)
      : model_id_(std::move(model_id)), version_(version), parent_(parent_version), layers_(std::move(layers)) {
    if (model_id_.empty() || model_id_.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "model_id must be 1..65535 bytes");
    if (version_ == kNoVersion) fail(ErrorCode::InvalidArgument, "version value reserved");
    if (parent_ && *parent_ >= version_)
      fail(ErrorCode::InvalidArgument, "parent_version " + std::to_string(*parent_) + " must be < version " + std::to_string(version_));
    if (layers_.size() > std::numeric_limits<std::uint32_t>::max()) fail(ErrorCode::InvalidArgument, "too many layers");
    std::unordered_set<std::string> seen;
    for (const auto& l : layers_)
      if (!seen.insert(l.name()).second) fail(ErrorCode::DuplicateLayer, "duplicate layer name '" + l.name() + "'");
    digest_ = architecture_digest(layout());
  }

  const std::string& model_id() const { return model_id_; }
  std::uint64_t version() const { return version_; }
  const std::optional<std::uint64_t>& parent_version() const { return parent_; }
  const std::vector<WeightTensor>& layers() const { return layers_; }
  std::uint64_t digest() const { return digest_; }
  ModelVersionId id() const { return {model_id_, version_}; }

  std::vector<std::pair<std::string, Shape>> layout() const {
    std::vector<std::pair<std::string, Shape>> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) out.emplace_back(l.name(), l.shape());
    return out;
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
  }

  /// Same layout, every weight zero; `version` defaults to this artifact's.
  ModelArtifact zeros_like() const {
    std::vector<WeightTensor> zs;
    zs.reserve(layers_.size());
    for (const auto& l : layers_) zs.push_back(WeightTensor::zeros(l.name(), l.shape()));
    return ModelArtifact(model_id_, version_, std::nullopt, std::move(zs));
  }

  friend bool operator==(const ModelArtifact& a, const ModelArtifact& b) {
    return a.model_id_ == b.model_id_ && a.version_ == b.version_ && a.parent_ == b.parent_ && a.layers_ == b.layers_;
  }

 private:
  std::string model_id_;
  std::uint64_t version_;
  std::optional<std::uint64_t> parent_;
  std::vector<WeightTensor> layers_;
  std::uint64_t digest_ = 0;
};

inline bool architecture_compatible(const ModelArtifact& a, const ModelArtifact& b) { return a.digest() == b.digest(); }

inline constexpr std::uint8_t kContainerMagic[4] = {'D', 'R', 'M', '1'};

/// Exact byte length of serialize_model(a).
inline std::size_t container_size(const ModelArtifact& a) {
  std::size_t n = 4 + 2 + a.model_id().size() + 8 + 1 + (a.parent_version() ? 8 : 0) + 4;
  for (const auto& l : a.layers()) n += 2 + l.name().size() + 1 + 8 * l.shape().size() + 4 * l.size();
  return n + 8;
}

inline Bytes serialize_model(const ModelArtifact& a) {
  ByteWriter w;
  w.reserve(container_size(a));
  w.raw(kContainerMagic);
  w.str(a.model_id());
  w.u64(a.version());
  w.u8(a.parent_version() ? 1 : 0);
  if (a.parent_version()) w.u64(*a.parent_version());
  w.u32(static_cast<std::uint32_t>(a.layers().size()));
  for (const auto& l : a.layers()) {
    w.str(l.name());
    w.u8(static_cast<std::uint8_t>(l.shape().size()));
    for (std::uint64_t d : l.shape()) w.u64(d);
    for (float v : l.data()) w.f32(v);
  }
  w.u64(fnv1a64(w.bytes()));
  return w.take();
}

inline ModelArtifact deserialize_model(ByteView bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    fail(ErrorCode::BadMagic, "not a DRM1 container");
  ByteReader r(bytes.subspan(4));
  std::string model_id = r.str();
  const std::uint64_t version = r.u64();
  const std::uint8_t parent_present = r.u8();
  if (parent_present > 1) fail(ErrorCode::BadHeader, "parent_present flag must be 0 or 1");
  std::optional<std::uint64_t> parent;
  if (parent_present) parent = r.u64();
  const std::uint32_t layer_count = r.u32();

  std::vector<WeightTensor> layers;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    std::string name = r.str();
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::uint64_t n = shape_product(shape);
    if (n > r.remaining() / 4) fail(ErrorCode::TruncatedPayload, "layer '" + name + "' payload exceeds container");
    ByteView payload = r.take(static_cast<std::size_t>(n) * 4);
    std::vector<float> data(static_cast<std::size_t>(n));
    ByteReader pr(payload);
    for (auto& v : data) v = pr.f32();
    layers.emplace_back(std::move(name), std::move(shape), std::move(data));
  }
  if (r.remaining() < 8) fail(ErrorCode::TruncatedPayload, "missing trailer");
  if (r.remaining() > 8) fail(ErrorCode::TrailerMismatch, "unexpected bytes before trailer");
  const std::uint64_t expected = fnv1a64(bytes.first(bytes.size() - 8));
  if (r.u64() != expected) fail(ErrorCode::TrailerMismatch, "container checksum mismatch");
  return ModelArtifact(std::move(model_id), version, parent, std::move(layers));
}

/// FNV-1a-64 over the little-endian f32 bytes of every weight, layers in
/// container order. Sender and receiver compare this after reconstruction.
inline std::uint64_t weight_checksum(const ModelArtifact& a) {
  Fnv1a64 h;
  for (const auto& l : a.layers())
    for (float v : l.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) h.update(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  return h.digest();
}

}  // namespace retina
