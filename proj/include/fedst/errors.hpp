#pragma once

#include <stdexcept>
#include <string>

namespace fedst {

// Error taxonomy shared by all modules. Everything derives from Error so
// callers (and the CLI) can map failures onto exit codes in one place.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/model shapes. Messages name both offending shapes.
struct DimensionError : Error {
  using Error::Error;
};

// An API precondition was violated (missing grad, non-scalar loss, ...).
struct ContractError : Error {
  using Error::Error;
};

// Structurally valid input that the operation cannot meaningfully process
// (all-zero distance matrix, empty split, zero-node subgraph, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Edge indices out of range, node count disagreement, and similar.
struct GraphConsistencyError : Error {
  using Error::Error;
};

// Invalid experiment or training configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Federation phases executed out of order (stale encodings etc.).
struct ProtocolError : Error {
  using Error::Error;
};

// Requested an analytic cost formula for a strategy that has none.
struct NoFormulaError : Error {
  using Error::Error;
};

// NaN/Inf encountered mid-run; carries round/phase context in the message.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace fedst
