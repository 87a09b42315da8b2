#pragma once

#include <stdexcept>
#include <string>

namespace tracto {

// Base for recoverable pipeline errors; the CLI maps these to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed binary or text input; message names the byte offset where known.
struct FormatError : Error {
  using Error::Error;
};

// Least-squares system not solvable (rank-deficient or underdetermined).
struct FitSingularError : Error {
  using Error::Error;
};

// Checkpoint file problems; message names the offending tensor or field.
struct CheckpointError : Error {
  using Error::Error;
};

// Sequence longer than the model block size.
struct ContextOverflowError : Error {
  using Error::Error;
};

// Non-finite gradients during training; message names the tensor.
struct TrainingDivergedError : Error {
  using Error::Error;
};

// Invalid bundle/phantom specification.
struct InvalidSpecError : Error {
  using Error::Error;
};

// Backward called with a trace produced by different parameters.
struct StaleTraceError : Error {
  using Error::Error;
};

}  // namespace tracto
