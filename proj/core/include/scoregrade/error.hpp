#pragma once

#include <stdexcept>
#include <string>

namespace scoregrade {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside a table or range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition on a call (non-scalar loss, K < 2, unknown head, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid value in user-provided data (non-binary cell, label out of range, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Byte token carrying a nonzero pad bit.
class CorruptTokenError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Input data has no spread (PCA on constant rows, ...).
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

/// Rank correlation requested with fewer than two distinct classes.
class UndefinedCorrelationError : public Error {
 public:
  using Error::Error;
};

/// Failure while reading or writing a file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. `code()` tells the failure modes apart.
class ParseError : public Error {
 public:
  enum class Code {
    kBadMagic,
    kBadVersion,
    kTruncated,
    kTrailingBytes,
    kPadBits,
    kMalformedHeader,
  };

  ParseError(Code code, const std::string& what) : Error(what), code_(code) {}

  [[nodiscard]] Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Checkpoint incompatible with the request.
class CheckpointError : public Error {
 public:
  enum class Code {
    kVersionMismatch,
    kMissingParameter,
    kShapeMismatch,
    kEncoderMismatch,
  };

  CheckpointError(Code code, const std::string& what) : Error(what), code_(code) {}

  [[nodiscard]] Code code() const noexcept { return code_; }

 private:
  Code code_;
};

}  // namespace scoregrade
