#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace retina {

enum class ErrorCode : std::uint16_t {
  // container / model
  BadMagic = 1,
  TruncatedPayload,
  ShapeMismatch,
  NonFiniteWeight,
  InvalidArgument,
  DuplicateLayer,
  ArchitectureMismatch,
  TrailerMismatch,
  // codec
  Overflow,
  MalformedVarint,
  LengthMismatch,
  BadHeader,
  BaseMismatch,
  ChecksumMismatch,
  // registry
  UnknownParent,
  NonMonotoneVersion,
  DuplicateVersion,
  UnknownVersion,
  NoCommonVersion,
  ChainGap,
  Io,
  // transport
  Protocol,
  Timeout,
  Remote,
  // trainer
  DimensionMismatch,
  DivergenceDetected,
  HypothesisViolated,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DuplicateLayer: return "DuplicateLayer";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::TrailerMismatch: return "TrailerMismatch";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::MalformedVarint: return "MalformedVarint";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::BaseMismatch: return "BaseMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::UnknownParent: return "UnknownParent";
    case ErrorCode::NonMonotoneVersion: return "NonMonotoneVersion";
    case ErrorCode::DuplicateVersion: return "DuplicateVersion";
    case ErrorCode::UnknownVersion: return "UnknownVersion";
    case ErrorCode::NoCommonVersion: return "NoCommonVersion";
    case ErrorCode::ChainGap: return "ChainGap";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Protocol: return "Protocol";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::Remote: return "Remote";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::HypothesisViolated: return "HypothesisViolated";
  }
  return "Unknown";
}

/// Every domain failure in the library is reported as an Error carrying a
/// machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace retina
