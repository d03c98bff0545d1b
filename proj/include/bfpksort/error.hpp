// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bfpksort {

enum class ErrorKind {
  kInvalidValue,
  kExponentOverflow,
  kShapeMismatch,
  kCorruptBuffer,
  kInvalidFormat,
  kInvalidRopeTables,
  kInvalidPermutation,
  kPlanMismatch,
  kNotATensorFile,
  kCorruptFile,
  kUnsupportedVersion,
  kIo,
  kInvalidConfig,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidValue: return "InvalidValue";
    case ErrorKind::kExponentOverflow: return "ExponentOverflow";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kCorruptBuffer: return "CorruptBuffer";
    case ErrorKind::kInvalidFormat: return "InvalidFormat";
    case ErrorKind::kInvalidRopeTables: return "InvalidRopeTables";
    case ErrorKind::kInvalidPermutation: return "InvalidPermutation";
    case ErrorKind::kPlanMismatch: return "PlanMismatch";
    case ErrorKind::kNotATensorFile: return "NotATensorFile";
    case ErrorKind::kCorruptFile: return "CorruptFile";
    case ErrorKind::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::kIo: return "Io";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace bfpksort
