#pragma once

// Versioned model store.
//
//   <root>/<model_id>/v<N>.drm          container files
//   <root>/<model_id>/v<A>_to_<B>.drp   delta packets (A may be "none")
//   <root>/<model_id>/.lock             advisory writer lock
//
// The directory listing is the index; nothing else needs to survive a crash.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retina/codec.hpp"
#include "retina/error.hpp"
#include "retina/io.hpp"
#include "retina/model.hpp"

namespace retina {

struct VersionSet {
  std::string model_id;
  std::vector<std::uint64_t> versions;  // sorted, unique

  VersionSet() = default;
  VersionSet(std::string id, std::vector<std::uint64_t> vs) : model_id(std::move(id)), versions(std::move(vs)) {
    std::sort(versions.begin(), versions.end());
    versions.erase(std::unique(versions.begin(), versions.end()), versions.end());
  }

  bool contains(std::uint64_t v) const { return std::binary_search(versions.begin(), versions.end(), v); }
  bool empty() const { return versions.empty(); }
  friend bool operator==(const VersionSet&, const VersionSet&) = default;
};

/// Greatest version held by both sides.
inline std::uint64_t select_prediction_version(const VersionSet& sender, const VersionSet& receiver) {
  if (sender.model_id != receiver.model_id)
    fail(ErrorCode::InvalidArgument, "version sets for different models: " + sender.model_id + ", " + receiver.model_id);
  std::vector<std::uint64_t> common;
  std::set_intersection(sender.versions.begin(), sender.versions.end(), receiver.versions.begin(), receiver.versions.end(),
                        std::back_inserter(common));
  if (common.empty()) fail(ErrorCode::NoCommonVersion, "no version of " + sender.model_id + " held by both sides");
  return common.back();
}

namespace detail {

inline void check_model_id(const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.front() == '.' ||
      id.find_first_of("/\\") != std::string::npos || id.find('\0') != std::string::npos)
    fail(ErrorCode::InvalidArgument, "model_id '" + id + "' is not usable as a directory name");
}

inline std::optional<std::uint64_t> parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  if (s.empty()) return std::nullopt;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string version_token(std::uint64_t v) { return v == kNoVersion ? "none" : std::to_string(v); }

class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorCode::Io, "cannot open lock " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      fail(ErrorCode::Io, "cannot lock " + path.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace detail

class Registry {
 public:
  explicit Registry(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) fail(ErrorCode::Io, "cannot create store " + root_.string() + ": " + ec.message());
  }

  /// $RETINA_STORE, if set.
  static std::optional<std::filesystem::path> default_root() {
    const char* env = std::getenv("RETINA_STORE");
    if (env == nullptr || *env == '\0') return std::nullopt;
    return std::filesystem::path(env);
  }

  const std::filesystem::path& root() const { return root_; }

  ModelVersionId register_model(const ModelArtifact& a) {
    detail::check_model_id(a.model_id());
    const auto dir = model_dir(a.model_id());
    std::filesystem::create_directories(dir);
    detail::FileLock lock(dir / ".lock");
    const VersionSet existing = versions(a.model_id());
    if (existing.contains(a.version())) fail(ErrorCode::DuplicateVersion, a.id().str() + " already registered");
    if (!existing.empty() && a.version() < existing.versions.back())
      fail(ErrorCode::NonMonotoneVersion, a.id().str() + " is older than v" + std::to_string(existing.versions.back()));
    if (a.parent_version() && !existing.contains(*a.parent_version()))
      fail(ErrorCode::UnknownParent, a.id().str() + " names missing parent v" + std::to_string(*a.parent_version()));
    write_file_atomic(model_path(a.id()), serialize_model(a));
    return a.id();
  }

  /// Keeps a packet next to the models; its base must already be stored.
  void store_packet(const DeltaPacket& pkt) {
    detail::check_model_id(pkt.target.model_id);
    const auto dir = model_dir(pkt.target.model_id);
    std::filesystem::create_directories(dir);
    detail::FileLock lock(dir / ".lock");
    if (!pkt.is_whole_model() && !has_model(pkt.base)) fail(ErrorCode::UnknownParent, "packet base " + pkt.base.str() + " not stored");
    write_file_atomic(packet_path(pkt.target.model_id, pkt.base.version, pkt.target.version), serialize_packet(pkt));
  }

  bool has_model(const ModelVersionId& id) const { return std::filesystem::exists(model_path(id)); }

  ModelArtifact get_model(const ModelVersionId& id) const {
    detail::check_model_id(id.model_id);
    const auto path = model_path(id);
    if (!std::filesystem::exists(path)) fail(ErrorCode::UnknownVersion, id.str() + " not in store");
    return deserialize_model(read_file(path));
  }

  std::optional<DeltaPacket> get_packet(const std::string& model_id, std::uint64_t from, std::uint64_t to) const {
    detail::check_model_id(model_id);
    const auto path = packet_path(model_id, from, to);
    if (!std::filesystem::exists(path)) return std::nullopt;
    return deserialize_packet(read_file(path));
  }

  VersionSet versions(const std::string& model_id) const {
    detail::check_model_id(model_id);
    std::vector<std::uint64_t> out;
    const auto dir = model_dir(model_id);
    if (std::filesystem::is_directory(dir)) {
      for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() < 6 || name.front() != 'v' || !name.ends_with(".drm")) continue;
        if (auto v = detail::parse_u64(std::string_view(name).substr(1, name.size() - 5))) out.push_back(*v);
      }
    }
    return VersionSet(model_id, std::move(out));
  }

  std::vector<std::string> model_ids() const {
    std::vector<std::string> out;
    for (const auto& entry : std::filesystem::directory_iterator(root_))
      if (entry.is_directory()) out.push_back(entry.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::filesystem::path model_path(const ModelVersionId& id) const {
    return model_dir(id.model_id) / ("v" + std::to_string(id.version) + ".drm");
  }
  std::filesystem::path packet_path(const std::string& model_id, std::uint64_t from, std::uint64_t to) const {
    return model_dir(model_id) / ("v" + detail::version_token(from) + "_to_" + std::to_string(to) + ".drp");
  }

 private:
  std::filesystem::path model_dir(const std::string& model_id) const { return root_ / model_id; }

  std::filesystem::path root_;
};

/// Folds decode, dequantize and compensate over `packets` starting from the
/// stored `base`, verifying each packet's checksum.
inline ModelArtifact reconstruct_chain(const Registry& store, const ModelVersionId& base,
                                       std::span<const DeltaPacket> packets) {
  ModelArtifact current = store.get_model(base);
  for (const auto& pkt : packets) {
    if (pkt.base != current.id()) fail(ErrorCode::ChainGap, "packet base " + pkt.base.str() + " but chain is at " + current.id().str());
    current = apply_packet(pkt, &current);
  }
  return current;
}

}  // namespace retina
