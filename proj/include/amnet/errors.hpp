#pragma once

#include <stdexcept>
#include <string>

namespace amnet {

// Tensor dimensions disagree with what an operation requires.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A mathematical precondition is violated (empty softmax input, threshold
// outside (0,1), non-positive step size, ...).
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input data breaks a documented invariant (duplicate track ids, labels
// outside {0,1}, out-of-order frames, ...).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A computation produced or encountered a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File I/O and format problems. Each load failure mode has its own type so
// callers can tell them apart.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : IoError {
  using IoError::IoError;
};

struct SchemaError : IoError {
  using IoError::IoError;
};

struct VersionError : IoError {
  using IoError::IoError;
};

}  // namespace amnet
