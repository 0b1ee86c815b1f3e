#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace promptreg {

enum class Errc {
  InvalidArgument,
  EmptyMask,
  AxisMismatch,
  ShapeMismatch,
  IoError,
  FormatError,
  NoPositivePrompt,
  PointOutOfBounds,
  TransportError,
  ProtocolError,
  PayloadTooLarge,
  EmptyRoi,
  ZeroPrototype,
  EmptyContour,
  NoKindsEnabled,
  AllBranchesFailed,
  EmptyAfterWarp,
  EmptyPairSet,
  EmptyLabel,
  SpecError,
  ConfigError,
  AllPromptsFailed,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::AxisMismatch: return "AxisMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::IoError: return "IoError";
    case Errc::FormatError: return "FormatError";
    case Errc::NoPositivePrompt: return "NoPositivePrompt";
    case Errc::PointOutOfBounds: return "PointOutOfBounds";
    case Errc::TransportError: return "TransportError";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::PayloadTooLarge: return "PayloadTooLarge";
    case Errc::EmptyRoi: return "EmptyRoi";
    case Errc::ZeroPrototype: return "ZeroPrototype";
    case Errc::EmptyContour: return "EmptyContour";
    case Errc::NoKindsEnabled: return "NoKindsEnabled";
    case Errc::AllBranchesFailed: return "AllBranchesFailed";
    case Errc::EmptyAfterWarp: return "EmptyAfterWarp";
    case Errc::EmptyPairSet: return "EmptyPairSet";
    case Errc::EmptyLabel: return "EmptyLabel";
    case Errc::SpecError: return "SpecError";
    case Errc::ConfigError: return "ConfigError";
    case Errc::AllPromptsFailed: return "AllPromptsFailed";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI, the HTTP service) can map it to exit codes or statuses.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace promptreg
