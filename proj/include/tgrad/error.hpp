#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tgrad {

enum class ErrorKind {
  ShapeMismatch,
  InvalidRange,
  InvalidAxis,
  CountMismatch,
  LabelOutOfRange,
  IndexOutOfBounds,
  ZeroSizeOutput,
  Syntax,
  UnknownOpcode,
  UnresolvedReference,
  VerifyFailed,
  TypeMismatch,
  MissingFunction,
  NonDifferentiable,
  DuplicateRegistration,
  NonScalarResult,
  MalformedRecord,
  Io,
  BadMagic,
  Truncated,
  MismatchedStructure,
  NotDescentDirection,
  MaxHalvingsExceeded,
  EmptyData,
  CsvParse,
  InvalidArgument,
  UnknownWorkload,
};

std::string_view errorKindName(ErrorKind kind);

/// Single exception type for the library; `kind()` carries the error class
/// so callers (and tests) can branch on it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(errorKindName(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace tgrad
