#include "tgrad/error.hpp"

namespace tgrad {

std::string_view errorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::InvalidRange: return "invalid-range";
    case ErrorKind::InvalidAxis: return "invalid-axis";
    case ErrorKind::CountMismatch: return "count-mismatch";
    case ErrorKind::LabelOutOfRange: return "label-out-of-range";
    case ErrorKind::IndexOutOfBounds: return "index-out-of-bounds";
    case ErrorKind::ZeroSizeOutput: return "zero-size-output";
    case ErrorKind::Syntax: return "syntax-error";
    case ErrorKind::UnknownOpcode: return "unknown-opcode";
    case ErrorKind::UnresolvedReference: return "unresolved-reference";
    case ErrorKind::VerifyFailed: return "verify-failed";
    case ErrorKind::TypeMismatch: return "type-mismatch";
    case ErrorKind::MissingFunction: return "missing-function";
    case ErrorKind::NonDifferentiable: return "non-differentiable";
    case ErrorKind::DuplicateRegistration: return "duplicate-registration";
    case ErrorKind::NonScalarResult: return "non-scalar-result";
    case ErrorKind::MalformedRecord: return "malformed-record";
    case ErrorKind::Io: return "io-error";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::Truncated: return "truncated-file";
    case ErrorKind::MismatchedStructure: return "mismatched-structure";
    case ErrorKind::NotDescentDirection: return "not-a-descent-direction";
    case ErrorKind::MaxHalvingsExceeded: return "max-halvings-exceeded";
    case ErrorKind::EmptyData: return "empty-data";
    case ErrorKind::CsvParse: return "csv-parse";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::UnknownWorkload: return "unknown-workload";
  }
  return "error";
}

}  // namespace tgrad
