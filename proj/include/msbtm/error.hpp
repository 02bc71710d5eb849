#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace msbtm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Raised by the Cholesky-based routines; `pivot()` is the zero-based index
// of the first non-positive pivot.
class NotSpdError : public Error {
 public:
  NotSpdError(std::size_t pivot, double value)
      : Error("matrix is not symmetric positive definite: pivot " + std::to_string(pivot) +
              " = " + std::to_string(value)),
        pivot_(pivot),
        value_(value) {}

  std::size_t pivot() const noexcept { return pivot_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t pivot_;
  double value_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step, long iterations, double last_value)
      : Error(what), step_(step), iterations_(iterations), last_value_(last_value) {}

  long step() const noexcept { return step_; }
  long iterations() const noexcept { return iterations_; }
  double last_value() const noexcept { return last_value_; }

 private:
  long step_;
  long iterations_;
  double last_value_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }

  std::vector<std::string> violations_;
};

}  // namespace msbtm
