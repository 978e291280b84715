#pragma once

#include <stdexcept>
#include <string>

namespace kdseg {

// Root of every exception thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LabelRangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NonFiniteError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Thrown when a reduction has nothing to reduce over (all pixels ignored,
/// empty split, ...).
class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class UnknownModelError : public Error {
 public:
  using Error::Error;
};

class UnknownTapError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class PairingError : public IoError {
 public:
  using IoError::IoError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A training loss became NaN/Inf. `term()` names the offending loss term.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string term, const std::string& what)
      : Error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

class SweepError : public Error {
 public:
  using Error::Error;
};

}  // namespace kdseg
