#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace glsim {

/// Every failure the engine reports carries one of these codes.
enum class ErrorCode {
  IoFailure,
  InvariantViolation,
  BadMagic,
  ManifestMismatch,
  UnsupportedVersion,
  SpanAlignmentFailure,
  MissingAnnotation,
  ParseFailure,
  DuplicateSurface,
  LayerNotExported,
  TokenOutOfRange,
  KOutOfRange,
  DegenerateEmbedding,
  NoVisualLayers,
  VarLayerMissing,
  EmptySpan,
  GridMismatch,
  SingleClass,
  DegenerateRange,
  SpecInvalid,
  Usage,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::ManifestMismatch: return "ManifestMismatch";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::SpanAlignmentFailure: return "SpanAlignmentFailure";
    case ErrorCode::MissingAnnotation: return "MissingAnnotation";
    case ErrorCode::ParseFailure: return "ParseFailure";
    case ErrorCode::DuplicateSurface: return "DuplicateSurface";
    case ErrorCode::LayerNotExported: return "LayerNotExported";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::DegenerateEmbedding: return "DegenerateEmbedding";
    case ErrorCode::NoVisualLayers: return "NoVisualLayers";
    case ErrorCode::VarLayerMissing: return "VarLayerMissing";
    case ErrorCode::EmptySpan: return "EmptySpan";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::DegenerateRange: return "DegenerateRange";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace glsim
