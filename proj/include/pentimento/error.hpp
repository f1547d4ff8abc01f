#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pentimento {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf reached an operation that requires finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: unknown layer names, bad weights, bad options.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed weight file. `offset()` is the byte position of the problem.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// An image could not be decoded or encoded.
class DecodeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Failure inside a reconstruction run, tagged with the pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace pentimento
