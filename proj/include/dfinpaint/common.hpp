// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfi {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up.
class DimensionError final : public Error {
 public:
  using Error::Error;
};

// NaN or Inf appeared in a value or gradient.
class NumericError final : public Error {
 public:
  using Error::Error;
};

// A mask leaves too few valid elements for the requested statistic.
class DegenerateInputError final : public Error {
 public:
  using Error::Error;
};

class ParameterError final : public Error {
 public:
  using Error::Error;
};

class IoError final : public Error {
 public:
  using Error::Error;
};

// Misuse of stateful objects, e.g. running backward twice on one tape.
class StateError final : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace dfi
