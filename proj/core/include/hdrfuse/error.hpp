#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hdrfuse {

enum class ErrorKind {
  MissingFile,
  ShapeMismatch,
  BadEV,
  IOFailure,
  CorruptHeader,
  WrongChannelCount,
  BadConfig,
  NonPositiveExposure,
  BadSpatialDims,
  SoftMaskRejected,
  ArityMismatch,
  SlotOutOfRange,
  EmptyDataset,
  ModeDataMismatch,
  PatchTooLarge,
  ImageTooSmall,
  MissingPrediction,
  ModelMismatch,
  NumericFailure,
};

std::string_view to_string(ErrorKind kind);

/// Exception carrying a machine-checkable error kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace hdrfuse
