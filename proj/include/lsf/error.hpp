#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lsf {

/// Failure categories surfaced by every module. The CLI maps these onto exit codes.
enum class Errc {
  EmptyInput,
  MissingSizeRow,
  TaskTooLarge,
  DuplicateTask,
  UnknownTask,
  ShapeError,
  NonFiniteCost,
  IoError,
  ParseError,
  ValidationError,
  MalformedHeader,
  TruncatedData,
  LabelNeverPresent,
  EmptyManifest,
  OutOfRangeLabel,
  EmptyVolume,
  PlacementFailure,
  InvalidConfig,
  AllChannelsMasked,
  DomainMismatch,
  EmptyDataset,
  FingerprintMismatch,
  VersionMismatch,
  CorruptPayload,
  EmptyForeground,
  EmptySet,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::MissingSizeRow: return "MissingSizeRow";
    case Errc::TaskTooLarge: return "TaskTooLarge";
    case Errc::DuplicateTask: return "DuplicateTask";
    case Errc::UnknownTask: return "UnknownTask";
    case Errc::ShapeError: return "ShapeError";
    case Errc::NonFiniteCost: return "NonFiniteCost";
    case Errc::IoError: return "IoError";
    case Errc::ParseError: return "ParseError";
    case Errc::ValidationError: return "ValidationError";
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::TruncatedData: return "TruncatedData";
    case Errc::LabelNeverPresent: return "LabelNeverPresent";
    case Errc::EmptyManifest: return "EmptyManifest";
    case Errc::OutOfRangeLabel: return "OutOfRangeLabel";
    case Errc::EmptyVolume: return "EmptyVolume";
    case Errc::PlacementFailure: return "PlacementFailure";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::AllChannelsMasked: return "AllChannelsMasked";
    case Errc::DomainMismatch: return "DomainMismatch";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::FingerprintMismatch: return "FingerprintMismatch";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::CorruptPayload: return "CorruptPayload";
    case Errc::EmptyForeground: return "EmptyForeground";
    case Errc::EmptySet: return "EmptySet";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace lsf
