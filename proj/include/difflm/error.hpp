#pragma once

#include <stdexcept>
#include <string>

namespace difflm {

// Base for every error thrown by this library. Subtypes exist so callers can
// map failure classes to distinct exit codes without parsing messages.
struct Error : std::runtime_error {
  explicit Error(const std::string &msg) : std::runtime_error(msg) {}
};

// Invalid configuration, bad CLI input, malformed schema, stage mismatch.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor shape mismatch; message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// API misuse (e.g. backward on a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

// Malformed input data (CSV, JSONL, token sequences).
struct DataError : Error {
  using Error::Error;
};

// Runtime training failure (non-finite loss, empty batch).
struct TrainingError : Error {
  using Error::Error;
};

// Metric cannot be computed (empty sample, single-class labels).
struct MetricError : Error {
  using Error::Error;
};

// Numeric-domain violation (e.g. score at t <= 0).
struct DomainError : Error {
  using Error::Error;
};

// Generation failed (attempt budget exhausted, length overflow).
struct GenerationError : Error {
  using Error::Error;
};

// Filesystem / serialization failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace difflm
