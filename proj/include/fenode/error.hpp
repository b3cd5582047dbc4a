#pragma once

#include <stdexcept>
#include <string>

namespace fenode {

/// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, dimensions, or arguments detected up front.
struct ConfigError : Error {
  using Error::Error;
};

/// Numerical failure at runtime: non-finite values, singular solves, divergence.
struct NumericError : Error {
  using Error::Error;
};

/// Integration produced a non-finite state. Carries where it happened.
struct DivergenceError : NumericError {
  int substep = -1;       // substep within the failing interval
  int rollout_step = -1;  // step within an enclosing rollout, if any

  DivergenceError(const std::string& msg, int substep_, int rollout_step_ = -1)
      : NumericError(msg), substep(substep_), rollout_step(rollout_step_) {}
};

/// File-format or filesystem failure (corrupt model, unwritable directory, ...).
struct IoError : Error {
  using Error::Error;
};

}  // namespace fenode
