#pragma once

#include <stdexcept>
#include <string>

namespace spectra_invar {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or array shapes that do not fit the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a computation graph (e.g. a second backward pass).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or arguments; maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data that makes an estimator undefined (zero variance, single class).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, Truncated, SizeMismatch, BadHeader, BadRecord };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace spectra_invar
