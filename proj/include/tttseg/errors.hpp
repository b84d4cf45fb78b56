#pragma once

#include <stdexcept>
#include <string>

namespace tttseg {

// Shape/axis violations on tensor operations.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct AxisError : std::invalid_argument {
  explicit AxisError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad argument values (negative std, out-of-range labels, ...).
struct ValueError : std::invalid_argument {
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid or inconsistent configuration (unknown keys, divisibility, ...).
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values where finiteness is part of the contract; diverged training.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / manifest consistency failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tttseg
