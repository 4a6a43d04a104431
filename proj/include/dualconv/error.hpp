#pragma once

#include <stdexcept>
#include <string>

namespace dualconv {

/// Raised when an iterative solver's objective blows past its divergence
/// threshold (10x the initial objective).
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int iteration, double objective)
      : std::runtime_error(what), iteration_(iteration), objective_(objective) {}

  int iteration() const noexcept { return iteration_; }
  double objective() const noexcept { return objective_; }

 private:
  int iteration_;
  double objective_;
};

/// Base for malformed-file errors. Subclasses distinguish the failure kind.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DimensionOverflowError : public FormatError {
 public:
  using FormatError::FormatError;
};

class NotImplementedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace dualconv
