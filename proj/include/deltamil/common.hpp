// Shared error types and small utilities.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace deltamil {

using Index = std::int64_t;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension/extent disagreement between operands.
struct ShapeError : Error {
  using Error::Error;
};

// Domain violations: log of non-positive entry, zero-norm key, saturated loss.
struct ValueError : Error {
  using Error::Error;
};

// File format / filesystem problems.
struct IoError : Error {
  using Error::Error;
};

// Invalid run configuration, rejected before any I/O.
struct ConfigError : Error {
  using Error::Error;
};

inline std::string shape_string(const std::vector<Index>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

inline Index numel(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

}  // namespace deltamil
