// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dfinpaint/adam.hpp"
#include "dfinpaint/grad_check.hpp"
#include "dfinpaint/gradient_suite.hpp"
#include "dfinpaint/masked_ops.hpp"
#include "dfinpaint/rng.hpp"
#include "dfinpaint/tensor.hpp"

using namespace dfi;
using Catch::Approx;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Reference convolution: explicit padded copy, then a dense window sum.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t c = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const std::size_t o = w.shape[0], k = w.shape[2];
  const std::size_t ph = h + 2 * pad, pw = wd + 2 * pad;
  std::vector<double> padded(c * ph * pw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < wd; ++q) padded[(ch * ph + r + pad) * pw + q + pad] = x.data[(ch * h + r) * wd + q];
  const std::size_t oh = (ph - k) / stride + 1, ow = (pw - k) / stride + 1;
  std::vector<double> out(o * oh * ow);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) {
        double s = b.data[oc];
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j)
              s += w.data[((oc * c + ch) * k + i) * k + j] * padded[(ch * ph + r * stride + i) * pw + q * stride + j];
        out[(oc * oh + r) * ow + q] = s;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST_CASE("conv2d identity kernel returns the input") {
  Tape t;
  Var x = t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Var y = conv2d(x, t.constant(Tensor(Shape{1, 1, 1, 1}, 1.0)), t.constant(Tensor(Shape{1}, 0.0)), 1, 0);
  CHECK(y.value().data == x.value().data);
}

TEST_CASE("conv2d 2x2 ones kernel sums the window") {
  Tape t;
  Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor w(Shape{1, 1, 2, 2}, 1.0), b(Shape{1}, 0.0);
  Var y = conv2d(t.constant(x), t.constant(w), t.constant(b), 1, 0);
  const auto oracle = naive_conv(x, w, b, 1, 0);
  REQUIRE(oracle.size() == 1);
  CHECK(oracle[0] == 10.0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 10.0);
}

TEST_CASE("conv2d output size follows the floor formula") {
  Tape t;
  Var y = conv2d(t.constant(Tensor(Shape{1, 1, 4, 4}, 0.5)), t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0)),
                 t.constant(Tensor(Shape{1}, 0.0)), 2, 1);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("conv2d matches a padded dense reference on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
    Tensor x = random_tensor(rng, {1, 2, 6, 5}), w = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
    Tape t;
    Var y = conv2d(t.constant(x), t.constant(w), t.constant(b), stride, pad);
    const auto ref = naive_conv(x, w, b, stride, pad);
    REQUIRE(y.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.value().data[i] == Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("conv2d is linear in its input when bias is zero") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(rng, {1, 2, 5, 5}), b = random_tensor(rng, {1, 2, 5, 5});
    Tensor w = random_tensor(rng, {2, 2, 3, 3}), zero(Shape{2}, 0.0);
    Tape t;
    Var wv = t.constant(w), bv = t.constant(zero);
    Var lhs = conv2d(add(t.constant(a), t.constant(b)), wv, bv, 1, 1);
    Var rhs = add(conv2d(t.constant(a), wv, bv, 1, 1), conv2d(t.constant(b), wv, bv, 1, 1));
    for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs.value().data[i] - rhs.value().data[i]) <= 1e-10);
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tape t;
  CHECK_THROWS_AS(conv2d(t.constant(Tensor(Shape{1, 2, 3, 3})), t.constant(Tensor(Shape{1, 3, 1, 1})),
                         t.constant(Tensor(Shape{1})), 1, 0),
                  DimensionError);
}

TEST_CASE("non-finite results raise numeric errors") {
  Tape t;
  Var x = t.constant(Tensor(Shape{1}, 1e200));
  CHECK_THROWS_AS(square(x), NumericError);
}

TEST_CASE("backward visits each recorded op once and refuses a replay") {
  Tensor p(Shape{3}, std::vector<double>{1, 2, 3});
  Tape t;
  Var x = t.leaf(p);
  Var y = sum(square(scale(x, 2.0)));
  t.backward(y);
  CHECK(t.backward_visits() == 3);
  CHECK(p.grad == std::vector<double>{8, 16, 24});
  CHECK_THROWS_AS(t.backward(y), StateError);
}

TEST_CASE("leaf gradients accumulate across uses") {
  Tensor p(Shape{2}, std::vector<double>{1, -1});
  Tape t;
  Var a = t.leaf(p), b = t.leaf(p);
  t.backward(sum(add(a, b)));
  CHECK(p.grad == std::vector<double>{2, 2});
}

TEST_CASE("grad_check of sum of squares") {
  const double err = grad_check([](Tape&, std::span<const Var> v) { return sum(square(v[0])); },
                                {Tensor(Shape{3}, std::vector<double>{1, 2, 3})});
  CHECK(err <= 1e-6);
}

TEST_CASE("grad_check of a conv -> relu -> sum chain") {
  Rng rng(5);
  Tensor w = random_tensor(rng, {2, 2, 3, 3}), b = random_tensor(rng, {2});
  const double err = grad_check(
      [&](Tape& t, std::span<const Var> v) { return sum(relu(conv2d(v[0], t.constant(w), t.constant(b), 1, 1))); },
      {random_tensor(rng, {1, 2, 5, 5})});
  CHECK(err <= 1e-4);
}

TEST_CASE("grad_check of masked normalization") {
  Rng rng(9);
  Mask m(6, 6);
  for (auto& v : m.values) v = rng.uniform() < 0.3;
  const double err = grad_check([&](Tape&, std::span<const Var> v) { return sum(square(df_norm(v[0], m))); },
                                {random_tensor(rng, {1, 1, 6, 6})});
  CHECK(err <= 1e-4);
}

TEST_CASE("gradient suite passes for every op") {
  for (const auto& row : run_gradient_suite(2024)) {
    INFO(row.op);
    CHECK(row.trials >= 20);
    CHECK(row.max_rel_error <= 1e-4);
  }
}

TEST_CASE("adam leaves zero-gradient parameters unchanged") {
  Tensor p(Shape{3}, std::vector<double>{1, 2, 3});
  p.grad.assign(3, 0.0);
  AdamState s;
  s.lr = 0.1;
  std::vector<Tensor*> ps{&p};
  adam_step(ps, s);
  CHECK(p.data == std::vector<double>{1, 2, 3});
  CHECK(s.step == 1);
}

TEST_CASE("adam first step moves by lr in the gradient's sign") {
  // Step 1: m^ = g, v^ = g^2, update = lr * g / (|g| + eps).
  const double g = 0.37, lr = 0.1, eps = 1e-8;
  const double expected = 5.0 - lr * g / (std::sqrt(g * g) + eps);
  Tensor p(Shape{1}, 5.0);
  p.grad = {g};
  AdamState s;
  s.lr = lr;
  std::vector<Tensor*> ps{&p};
  adam_step(ps, s);
  CHECK(p.data[0] == Approx(expected).epsilon(1e-14));
  CHECK(p.data[0] == Approx(4.9).margin(1e-6));
}

TEST_CASE("adam is deterministic and validates inputs") {
  auto run = [] {
    Tensor p(Shape{2}, std::vector<double>{0.5, -0.5});
    AdamState s;
    std::vector<Tensor*> ps{&p};
    for (int i = 0; i < 5; ++i) {
      p.grad = {0.1 * i, -0.2};
      adam_step(ps, s);
    }
    return p.data;
  };
  CHECK(run() == run());
  Tensor p(Shape{1}, 0.0);
  p.grad = {std::nan("")};
  AdamState s;
  std::vector<Tensor*> ps{&p};
  CHECK_THROWS_AS(adam_step(ps, s), NumericError);
}

TEST_CASE("warm-up ramps linearly then holds") {
  CHECK(warmup_lr(1.0, 0, 4) == 0.25);
  CHECK(warmup_lr(1.0, 3, 4) == 1.0);
  CHECK(warmup_lr(1.0, 10, 4) == 1.0);
  CHECK(warmup_lr(1.0, 0, 0) == 1.0);
}

TEST_CASE("rng streams are reproducible and seed-dependent") {
  Rng a(0), b(0), c(1);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
}

TEST_CASE("rng uniform mean is near one half") {
  Rng r(123);
  double s = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    s += u;
  }
  const double mean = s / 100000.0;
  CHECK(mean > 0.49);
  CHECK(mean < 0.51);
}

TEST_CASE("cross entropy of logits (1,0,0) at class 0") {
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  CHECK(expected == Approx(0.5514).margin(1e-4));
  Tape t;
  std::vector<int> target{0};
  std::vector<std::uint8_t> sel{1};
  Var l = cross_entropy_rows(t.constant(Tensor(Shape{1, 3}, std::vector<double>{1, 0, 0})), target, sel);
  CHECK(l.item() == Approx(expected).epsilon(1e-14));
}

TEST_CASE("masked attention with no admissible key outputs zeros") {
  Tape t;
  Rng rng(2);
  Var q = t.constant(random_tensor(rng, {2, 4}));
  Var kv = t.constant(random_tensor(rng, {3, 4}));
  std::vector<std::uint8_t> all{1, 1, 1};
  Var y = masked_attention(q, kv, kv, all, 2, false);
  for (double v : y.value().data) CHECK(v == 0.0);
}
