#pragma once

#include <stdexcept>
#include <string>

namespace lofit {

/// Malformed input: bad shapes, out-of-range ids, violated preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Two intervention sets that both claim the same head.
class ConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data that cannot support the requested fit (e.g. a single label class).
class DegenerateDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimisation.
class TrainingDivergence : public std::runtime_error {
 public:
  explicit TrainingDivergence(const std::string& parameter)
      : std::runtime_error("non-finite value in parameter '" + parameter + "'"),
        parameter_(parameter) {}

  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

/// Unusable experiment configuration or input file (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lofit
