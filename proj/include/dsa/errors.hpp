#pragma once

#include <stdexcept>
#include <string>

namespace dsa {

/// Invalid argument to a library routine (bad index, bad shape, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Experiment or model configuration rejected.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A point lies outside the feasible set by more than the active tolerance,
/// or a feasible set turned out to be empty.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Not enough usable samples for a statistical estimate.
class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure inside a linear-algebra routine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dsa
