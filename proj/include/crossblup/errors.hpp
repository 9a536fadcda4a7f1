#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace crossblup {

// Base for every error thrown by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations: out-of-range indices, shape mismatches, bad options.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Marginal covariance is not positive definite (some eigenvalue <= 0).
class SingularCovarianceError : public Error {
 public:
  using Error::Error;
};

// A covariate block or the GLS normal equations are numerically singular.
class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

// A computation would exceed a configured size or memory guard.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// Malformed or unbalanced input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid simulation / command configuration. `pointer()` is a JSON pointer
// to the offending value when the configuration came from JSON.
class ConfigError : public Error {
 public:
  ConfigError(std::string pointer, const std::string& what)
      : Error(pointer.empty() ? what : pointer + ": " + what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

}  // namespace crossblup
