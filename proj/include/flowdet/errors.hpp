#pragma once

#include <stdexcept>
#include <string>

namespace flowdet {

// Shape/contract violations between tensors or point sets.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files (checkpoints, KITTI .bin, manifests).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf reached a place where finiteness is an invariant.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (unknown keys, out-of-range values).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flowdet
