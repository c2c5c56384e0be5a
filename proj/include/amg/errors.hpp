#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace amg {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation needs.
struct ShapeError : Error {
  using Error::Error;
};

// A caller violated an operation precondition.
struct ContractError : Error {
  using Error::Error;
};

// Non-finite input where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Invalid configuration value (rates, weights, geometry).
struct ConfigError : Error {
  using Error::Error;
};

// Any attempt to drop the class token from a key/value set.
struct ClassTokenError : ContractError {
  using ContractError::ContractError;
};

// A score was requested from a capture that never ran (or ran without gradients).
struct NotCalibratedError : Error {
  using Error::Error;
};

// The requested pruning rate cannot be met without breaking a per-layer floor.
struct InfeasiblePlanError : Error {
  std::vector<int> binding_layers;
  InfeasiblePlanError(const std::string& msg, std::vector<int> layers)
      : Error(msg), binding_layers(std::move(layers)) {}
};

// Training produced a non-finite loss; the model is rolled back to the last good state.
struct DivergenceError : Error {
  using Error::Error;
};

// File or serialization problem.
struct IoError : Error {
  using Error::Error;
};

}  // namespace amg
