// Error types shared by every obsfit module.
#pragma once

#include <stdexcept>
#include <string>

namespace obsfit {

/// Precondition or input-shape violation.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An Euler-Maruyama path left the finite range.
class SimulationDiverged : public std::runtime_error {
 public:
  SimulationDiverged(const std::string& what, std::size_t path, std::size_t step)
      : std::runtime_error(what), path_(path), step_(step) {}
  std::size_t path() const noexcept { return path_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t path_;
  std::size_t step_;
};

/// Derivative order above the spline degree, or a feature the space cannot provide.
class UnsupportedError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the domain of a special function.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Numerical breakdown that leaves no usable result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace obsfit
