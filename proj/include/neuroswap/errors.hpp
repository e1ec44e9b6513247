#pragma once

#include <stdexcept>
#include <string>

namespace neuroswap {

// Error taxonomy shared across the library. Everything derives from
// std::runtime_error so callers can catch broadly or by kind.

// Shape / extent mismatches between tensors or layers.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Mathematical domain violations (log of non-positive input, etc).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

// NaN/Inf surfaced by a forward op. Never silent.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// API misuse: backward on a non-scalar, double backward, mismatched
// optimizer state, and similar caller-side violations.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Invalid configuration values (temperature <= 0, too few domains, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// I/O and file format problems.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace neuroswap
