#include "span/error.hpp"

namespace span {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DuplicateCoordinate: return "DuplicateCoordinate";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyMap: return "EmptyMap";
    case ErrorCode::Misaligned: return "Misaligned";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedStream: return "TruncatedStream";
    case ErrorCode::RulebookMismatch: return "RulebookMismatch";
    case ErrorCode::RulebookMissing: return "RulebookMissing";
    case ErrorCode::MissingContext: return "MissingContext";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::IndexError: return "IndexError";
    case ErrorCode::DegenerateQuantiles: return "DegenerateQuantiles";
    case ErrorCode::EmptyTape: return "EmptyTape";
    case ErrorCode::NonPositiveOutputSize: return "NonPositiveOutputSize";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace span
