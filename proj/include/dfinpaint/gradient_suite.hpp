// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfinpaint/df_vqgan.hpp"
#include "dfinpaint/grad_check.hpp"
#include "dfinpaint/masked_ops.hpp"

namespace dfi {

struct GradCheckRow {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t trials = 0;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from 0 so kinked activations are probed off the kink.
inline Tensor off_zero_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

inline Mask random_mask(Rng& rng, std::size_t h, std::size_t w, double ratio) {
  Mask m(h, w);
  for (auto& v : m.values) v = rng.uniform() < ratio;
  return m;
}

// f = sum(w * out), w fixed per trial, so every output element is weighted.
inline Var weighted_sum(Var out, const Tensor& w) {
  if (out.size() != w.size()) throw DimensionError("gradient suite: weight size");
  return sum(mul(out, out.tape->constant(Tensor(out.shape(), w.data))));
}

inline Tensor weights_for(Rng& rng, const Shape& shape) { return random_tensor(rng, shape, 0.5, 1.5); }

// Runs `make_case` `trials` times; each returns the case's max relative error.
inline GradCheckRow run_case(const std::string& op, std::size_t trials, Rng& rng,
                             const std::function<double(Rng&)>& make_case) {
  GradCheckRow row{op, 0.0, trials};
  for (std::size_t t = 0; t < trials; ++t) row.max_rel_error = std::max(row.max_rel_error, make_case(rng));
  return row;
}

// Output-shape probe: evaluates fn once to learn the weight shape.
inline Shape probe_shape(const std::function<Var(Tape&, std::span<const Var>)>& fn, const std::vector<Tensor>& in) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const Tensor& x : in) vars.push_back(tape.constant(Tensor(x.shape, x.data)));
  return fn(tape, vars).shape();
}

inline double check_weighted(Rng& rng, std::vector<Tensor> inputs,
                             const std::function<Var(Tape&, std::span<const Var>)>& op) {
  const Tensor w = weights_for(rng, probe_shape(op, inputs));
  return grad_check([&](Tape& t, std::span<const Var> v) { return weighted_sum(op(t, v), w); }, std::move(inputs));
}

}  // namespace detail

/// Central-difference checks of every differentiable op (64-bit, eps 1e-5).
inline std::vector<GradCheckRow> run_gradient_suite(std::uint64_t seed, std::size_t trials = 20) {
  using detail::check_weighted;
  using detail::off_zero_tensor;
  using detail::random_tensor;
  using VarSpan = std::span<const Var>;
  Rng rng(seed);
  std::vector<GradCheckRow> rows;
  auto add_case = [&](const std::string& name, const std::function<double(Rng&)>& fn) {
    rows.push_back(detail::run_case(name, trials, rng, fn));
  };

  add_case("add", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3}), random_tensor(r, {2, 3})},
                          [](Tape&, VarSpan v) { return add(v[0], v[1]); });
  });
  add_case("sub", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3}), random_tensor(r, {2, 3})},
                          [](Tape&, VarSpan v) { return sub(v[0], v[1]); });
  });
  add_case("mul", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3}), random_tensor(r, {2, 3})},
                          [](Tape&, VarSpan v) { return mul(v[0], v[1]); });
  });
  add_case("scale/add_scalar", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {5})},
                          [](Tape&, VarSpan v) { return add_scalar(scale(v[0], -1.7), 0.3); });
  });
  add_case("square", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {6})}, [](Tape&, VarSpan v) { return square(v[0]); });
  });
  add_case("relu", [](Rng& r) {
    return check_weighted(r, {off_zero_tensor(r, {8})}, [](Tape&, VarSpan v) { return relu(v[0]); });
  });
  add_case("leaky_relu", [](Rng& r) {
    return check_weighted(r, {off_zero_tensor(r, {8})}, [](Tape&, VarSpan v) { return leaky_relu(v[0]); });
  });
  add_case("sigmoid", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {6}, -3, 3)}, [](Tape&, VarSpan v) { return sigmoid(v[0]); });
  });
  add_case("silu", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {6}, -3, 3)}, [](Tape&, VarSpan v) { return silu(v[0]); });
  });
  add_case("log_sigmoid", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {6}, -4, 4)}, [](Tape&, VarSpan v) { return log_sigmoid(v[0]); });
  });
  add_case("mean/mse", [](Rng& r) {
    return grad_check([](Tape&, VarSpan v) { return add(mean(v[0]), mse(v[0], v[1])); },
                      {random_tensor(r, {3, 2}), random_tensor(r, {3, 2})});
  });
  add_case("reshape/transpose", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3})},
                          [](Tape&, VarSpan v) { return transpose(reshape(v[0], {3, 2})); });
  });
  add_case("concat_rows/slice_rows", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3}), random_tensor(r, {1, 3})}, [](Tape&, VarSpan v) {
      std::vector<Var> parts{v[0], v[1]};
      return slice_rows(concat_rows(parts), 1, 3);
    });
  });
  add_case("matmul", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {2, 3}), random_tensor(r, {3, 4})},
                          [](Tape&, VarSpan v) { return matmul(v[0], v[1]); });
  });
  add_case("linear", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {3, 4}), random_tensor(r, {4, 2}), random_tensor(r, {2})},
                          [](Tape&, VarSpan v) { return linear(v[0], v[1], v[2]); });
  });
  add_case("embedding", [](Rng& r) {
    std::vector<int> ids{2, 0, 2, 1};
    return check_weighted(r, {random_tensor(r, {3, 4})}, [ids](Tape&, VarSpan v) { return embedding(v[0], ids); });
  });
  add_case("replace_rows", [](Rng& r) {
    std::vector<std::uint8_t> sel{0, 1, 0, 1};
    return check_weighted(r, {random_tensor(r, {4, 3}), random_tensor(r, {1, 3})},
                          [sel](Tape&, VarSpan v) { return replace_rows(v[0], sel, v[1]); });
  });
  add_case("layer_norm_rows", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {3, 5}), random_tensor(r, {5}, 0.5, 1.5), random_tensor(r, {5})},
                          [](Tape&, VarSpan v) { return layer_norm_rows(v[0], v[1], v[2]); });
  });
  add_case("cross_entropy_rows", [](Rng& r) {
    std::vector<int> targets{0, 2, 1, 3};
    std::vector<std::uint8_t> sel{1, 0, 1, 1};
    return grad_check([targets, sel](Tape&, VarSpan v) { return cross_entropy_rows(v[0], targets, sel); },
                      {random_tensor(r, {4, 4}, -2, 2)});
  });
  add_case("dropout", [](Rng& r) {
    const std::uint64_t s = r.next_u64();
    return check_weighted(r, {random_tensor(r, {10})}, [s](Tape&, VarSpan v) {
      Rng local(s);
      return dropout(v[0], 0.3, local);
    });
  });
  add_case("masked_attention", [](Rng& r) {
    std::vector<std::uint8_t> keys{0, 1, 0, 0};
    return check_weighted(r, {random_tensor(r, {3, 4}), random_tensor(r, {4, 4}), random_tensor(r, {4, 4})},
                          [keys](Tape&, VarSpan v) { return masked_attention(v[0], v[1], v[2], keys, 2, false); });
  });
  add_case("masked_attention/causal", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {4, 4}), random_tensor(r, {4, 4}), random_tensor(r, {4, 4})},
                          [](Tape&, VarSpan v) { return masked_attention(v[0], v[1], v[2], {}, 2, true); });
  });
  add_case("conv2d", [](Rng& r) {
    const std::size_t stride = 1 + r.below(2), pad = r.below(2);
    return check_weighted(r, {random_tensor(r, {1, 2, 5, 5}), random_tensor(r, {3, 2, 3, 3}), random_tensor(r, {3})},
                          [stride, pad](Tape&, VarSpan v) { return conv2d(v[0], v[1], v[2], stride, pad); });
  });
  add_case("conv2d->relu->sum", [](Rng& r) {
    Tensor w = random_tensor(r, {2, 2, 3, 3}), b = random_tensor(r, {2});
    return grad_check(
        [w, b](Tape& t, VarSpan v) { return sum(relu(conv2d(v[0], t.constant(w), t.constant(b), 1, 1))); },
        {random_tensor(r, {1, 2, 5, 5})});
  });
  add_case("channel_affine", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {1, 2, 3, 3}), random_tensor(r, {2}), random_tensor(r, {2})},
                          [](Tape&, VarSpan v) { return channel_affine(v[0], v[1], v[2]); });
  });
  add_case("map_to_rows/rows_to_map", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {1, 3, 2, 2})},
                          [](Tape&, VarSpan v) { return rows_to_map(scale(map_to_rows(v[0]), 2.0), 2, 2); });
  });
  add_case("nearest_upsample", [](Rng& r) {
    return check_weighted(r, {random_tensor(r, {1, 2, 2, 3})},
                          [](Tape&, VarSpan v) { return nearest_upsample(v[0], 2); });
  });
  add_case("df_norm", [](Rng& r) {
    const Mask m = detail::random_mask(r, 6, 6, 0.3);
    if (36 - m.defective_count() < 2) return 0.0;
    return check_weighted(r, {random_tensor(r, {1, 2, 6, 6})},
                          [m](Tape&, VarSpan v) { return df_norm(v[0], m); });
  });
  add_case("df_conv2d", [](Rng& r) {
    const Mask m = detail::random_mask(r, 5, 5, 0.3);
    const std::size_t stride = 1 + r.below(2), pad = r.below(2);
    return check_weighted(r, {random_tensor(r, {1, 2, 5, 5}), random_tensor(r, {2, 2, 3, 3}), random_tensor(r, {2})},
                          [m, stride, pad](Tape&, VarSpan v) { return df_conv2d(v[0], m, v[1], v[2], stride, pad); });
  });
  add_case("df_attention", [](Rng& r) {
    Mask m = detail::random_mask(r, 1, 5, 0.3);
    return check_weighted(r, {random_tensor(r, {5, 4})},
                          [m](Tape&, VarSpan v) { return df_attention(v[0], m, 2); });
  });
  add_case("select_by_mask/symmetric_mix", [](Rng& r) {
    const Mask m = detail::random_mask(r, 3, 3, 0.4);
    const double tau = r.uniform(0.0, 3.0);
    return check_weighted(r, {random_tensor(r, {1, 2, 3, 3}), random_tensor(r, {1, 2, 3, 3})},
                          [m, tau](Tape&, VarSpan v) {
                            return add(select_by_mask(v[0], v[1], m), symmetric_mix(v[0], v[1], m, tau));
                          });
  });
  // Finite differences cannot see stop-gradients, so each term is checked
  // against the input it trains with the other input held constant.
  add_case("quantize/commitment_term", [](Rng& r) {
    const Mask m(2, 2);
    const Tensor codebook = random_tensor(r, {4, 3});
    return grad_check([m, codebook](Tape& t, VarSpan v) { return quantize(v[0], t.constant(codebook), m).commitment_term; },
                      {random_tensor(r, {1, 3, 2, 2})});
  });
  add_case("quantize/codebook_term", [](Rng& r) {
    const Mask m(2, 2);
    const Tensor z = random_tensor(r, {1, 3, 2, 2});
    return grad_check([m, z](Tape& t, VarSpan v) { return quantize(t.constant(z), v[0], m).codebook_term; },
                      {random_tensor(r, {4, 3})});
  });
  // Gradient through the straight-through path at z vs finite differences
  // of the downstream loss evaluated at q = B[tokens].
  add_case("quantize/straight_through", [](Rng& r) {
    const Mask m(2, 2);
    const Tensor z = random_tensor(r, {1, 3, 2, 2});
    const Tensor codebook = random_tensor(r, {4, 3});
    const Tensor w = detail::weights_for(r, z.shape);
    auto downstream = [w](Var q) { return sum(mul(square(q), q.tape->constant(Tensor(q.shape(), w.data)))); };
    Tensor zl(z.shape, z.data);
    Tensor q_value;
    {
      Tape tape;
      QuantizeResult q = quantize(tape.leaf(zl), tape.constant(Tensor(codebook.shape, codebook.data)), m);
      q_value = Tensor(q.quantized.shape(), q.quantized.value().data);
      tape.backward(downstream(q.quantized));
    }
    Tensor ql(q_value.shape, q_value.data);
    double worst = 0.0;
    const double eps = 1e-5;
    for (std::size_t i = 0; i < ql.size(); ++i) {
      auto eval = [&](double delta) {
        Tape tape(false);
        Tensor probe(ql.shape, ql.data);
        probe.data[i] += delta;
        return downstream(tape.constant(std::move(probe))).item();
      };
      const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
      worst = std::max(worst, relative_error(zl.grad[i], numeric));
    }
    return worst;
  });
  return rows;
}

}  // namespace dfi
