// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dfinpaint/tensor.hpp"

namespace dfi {

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns the max relative error over every input element.
inline double grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, double eps = 1e-5) {
  for (const Tensor& in : inputs) {
    if (!in.all_finite()) throw NumericError("grad_check: non-finite input");
  }
  for (Tensor& in : inputs) in.grad.clear();

  {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor& in : inputs) vars.push_back(tape.leaf(in));
    Var out = fn(tape, vars);
    tape.backward(out);
  }

  auto evaluate = [&fn](const std::vector<Tensor>& xs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.constant(Tensor(x.shape, x.data)));
    const double y = fn(tape, vars).item();
    if (!std::isfinite(y)) throw NumericError("grad_check: non-finite objective");
    return y;
  };

  std::vector<Tensor> probe;
  for (const Tensor& in : inputs) probe.emplace_back(in.shape, in.data);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double original = probe[i].data[j];
      probe[i].data[j] = original + eps;
      const double up = evaluate(probe);
      probe[i].data[j] = original - eps;
      const double down = evaluate(probe);
      probe[i].data[j] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = inputs[i].has_grad() ? inputs[i].grad[j] : 0.0;
      worst = std::max(worst, relative_error(analytic, numeric));
    }
  }
  return worst;
}

}  // namespace dfi
