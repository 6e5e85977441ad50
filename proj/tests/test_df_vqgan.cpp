// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "dfinpaint/dfinpaint.hpp"

using namespace dfi;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

Tensor random_image(Rng& rng, std::size_t s = 32) {
  Tensor t(Shape{3, s, s});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

Mask codec_mask(Rng& rng, const DefectFreeCodec& codec) {
  const BoundingBox box{static_cast<std::size_t>(4 + rng.below(8)), static_cast<std::size_t>(4 + rng.below(8)),
                        static_cast<std::size_t>(20 + rng.below(8)), static_cast<std::size_t>(20 + rng.below(8))};
  return sample_codec_mask(rng, codec, box);
}

Tensor scramble(Rng& rng, const Tensor& x, const Mask& m) {
  Tensor y(x.shape, x.data);
  for (std::size_t i = 0; i < y.size(); ++i)
    if (m.values[i % m.size()]) y.data[i] = rng.uniform(-3.0, 3.0);
  return y;
}

struct Brute {
  int index;
  double dist;
};

Brute nearest(const std::vector<double>& z, const Tensor& codebook) {
  const std::size_t k = codebook.shape[0], d = codebook.shape[1];
  Brute b{-1, std::numeric_limits<double>::infinity()};
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (z[c] - codebook.data[j * d + c]) * (z[c] - codebook.data[j * d + c]);
    if (s < b.dist) b = {static_cast<int>(j), s};
  }
  return b;
}

QuantizeResult quantize_point(Tape& t, std::vector<double> z, const Tensor& codebook) {
  const std::size_t d = z.size();
  return quantize(t.constant(Tensor(Shape{1, d, 1, 1}, std::move(z))), t.constant(codebook), Mask(1, 1));
}

}  // namespace

TEST_CASE("codec config validates and round-trips through JSON") {
  CodecConfig c;
  CHECK(c.latent_size() == 4);
  const CodecConfig back = codec_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(back) == to_json(c));
  CHECK(std::isinf(back.tau[0]));
  c.widths = {16, 32};
  CHECK_THROWS_AS(c.validate(), ParameterError);
}

TEST_CASE("mask pyramid follows the any-defective rule at every level") {
  DefectFreeCodec codec(CodecConfig{}, 1);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Mask m = codec_mask(rng, codec);
    const MaskPyramid pyr = codec.mask_pyramid(m);
    REQUIRE(pyr.levels.size() == 4);
    CHECK(pyr.levels[1].height == 16);
    CHECK(pyr.levels[2].height == 8);
    CHECK(pyr.levels[3].height == 4);
    for (std::size_t l = 1; l < 4; ++l) {
      const std::size_t f = std::size_t{1} << l;
      for (std::size_t r = 0; r < pyr.levels[l].height; ++r)
        for (std::size_t c = 0; c < pyr.levels[l].width; ++c) {
          bool any = false;
          for (std::size_t y = r * f; y < (r + 1) * f; ++y)
            for (std::size_t x = c * f; x < (c + 1) * f; ++x) any = any || m.at(y, x);
          CHECK(pyr.levels[l].at(r, c) == any);
        }
    }
  }
}

TEST_CASE("codec rejects masks it cannot normalize") {
  DefectFreeCodec codec(CodecConfig{}, 1);
  CHECK_FALSE(codec.accepts_mask(Mask(32, 32, 1)));
  CHECK(codec.accepts_mask(Mask(32, 32)));
  CHECK_FALSE(codec.accepts_mask(Mask(16, 16)));
}

TEST_CASE("quantize picks the nearest code") {
  const Tensor b(Shape{2, 2}, std::vector<double>{0, 0, 1, 1});
  Tape t;
  CHECK(quantize_point(t, {0.2, 0.1}, b).tokens.tokens[0] == 0);
  CHECK(quantize_point(t, {0.9, 0.7}, b).tokens.tokens[0] == 1);
  CHECK(quantize_point(t, {0.5, 0.5}, b).tokens.tokens[0] == 0);
}

TEST_CASE("vq terms vanish on a code and equal the squared gap otherwise") {
  const Tensor b(Shape{2, 2}, std::vector<double>{0, 0, 3, 3});
  Tape t;
  auto on = quantize_point(t, {3, 3}, b);
  CHECK(on.codebook_term.item() == 0.0);
  CHECK(on.commitment_term.item() == 0.0);
  auto off = quantize_point(t, {1, 0}, b);
  CHECK(off.tokens.tokens[0] == 0);
  CHECK(off.codebook_term.item() == 1.0);
  CHECK(off.commitment_term.item() == 1.0);
}

TEST_CASE("quantize agrees with brute-force search") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(64), d = 1 + rng.below(8);
    Tensor cb(Shape{k, d});
    for (double& v : cb.data) v = rng.uniform(-1, 1);
    std::vector<double> z(d);
    for (double& v : z) v = rng.uniform(-1.2, 1.2);
    Tape t;
    auto q = quantize_point(t, z, cb);
    const Brute want = nearest(z, cb);
    CHECK(q.tokens.tokens[0] == want.index);
    CHECK(q.commitment_term.item() == Approx(want.dist).epsilon(1e-12));
  }
}

TEST_CASE("straight-through gradient equals the identity-path gradient") {
  Rng rng(4);
  Tensor cb(Shape{8, 3});
  for (double& v : cb.data) v = rng.uniform(-1, 1);
  Tensor w(Shape{1, 3, 2, 2});
  for (double& v : w.data) v = rng.uniform(-1, 1);
  Tensor z(Shape{1, 3, 2, 2});
  for (double& v : z.data) v = rng.uniform(-1, 1);

  // Linear readout: identity path has gradient w.
  {
    Tape t;
    Var zv = t.leaf(z);
    auto q = quantize(zv, t.constant(cb), Mask(2, 2));
    t.backward(sum(mul(q.quantized, t.constant(w))));
    CHECK(z.grad == w.data);
  }
  // Nonlinear readout: gradient w.r.t. z is the readout's gradient at B[z~].
  z.grad.clear();
  Tensor at_q(Shape{1, 3, 2, 2});
  {
    Tape t;
    Var zv = t.leaf(z);
    auto q = quantize(zv, t.constant(cb), Mask(2, 2));
    at_q.data = q.quantized.value().data;
    t.backward(sum(square(mul(q.quantized, t.constant(w)))));
  }
  {
    Tape t;
    Var qv = t.leaf(at_q);
    t.backward(sum(square(mul(qv, t.constant(w)))));
  }
  CHECK(z.grad == at_q.grad);
}

TEST_CASE("one codebook step moves the assigned entry toward its latent") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor cb(Shape{6, 4});
    for (double& v : cb.data) v = rng.uniform(-1, 1);
    std::vector<double> z(4);
    for (double& v : z) v = rng.uniform(-1, 1);
    int tok = 0;
    {
      Tape t;
      Var cbv = t.leaf(cb);
      auto q = quantize(t.constant(Tensor(Shape{1, 4, 1, 1}, z)), cbv, Mask(1, 1));
      tok = q.tokens.tokens[0];
      t.backward(q.codebook_term);
    }
    auto dist = [&] {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += std::pow(cb.data[tok * 4 + c] - z[c], 2);
      return s;
    };
    const double before = dist();
    AdamState opt;
    opt.lr = 0.01;
    std::vector<Tensor*> ps{&cb};
    adam_step(ps, opt);
    CHECK(dist() < before);
  }
}

TEST_CASE("vq_losses on a perfect reconstruction") {
  Tape t;
  Var img = t.constant(Tensor(Shape{1, 3, 4, 4}, 0.3));
  Var zero = t.constant(Tensor(Shape{1}, 0.0));
  Var feats = t.constant(Tensor(Shape{1, 2, 2, 2}, 0.7));
  Var logits = t.constant(Tensor(Shape{1, 1, 2, 2}, 0.0));
  VqLosses l = vq_losses(img, img, zero, zero, feats, feats, logits, logits);
  CHECK(l.vq.item() == 0.0);
  CHECK(l.perceptual.item() == 0.0);
  CHECK(l.adversarial.item() == Approx(2.0 * std::log(0.5)).epsilon(1e-14));
  CHECK(l.adversarial.item() == Approx(-1.3863).margin(1e-4));
}

TEST_CASE("decoder copies non-defective pixels exactly") {
  DefectFreeCodec codec(CodecConfig{}, 5);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor img = random_image(rng);
    const Mask m = trial == 0 ? Mask(32, 32) : codec_mask(rng, codec);
    Tape t(false);
    auto enc = codec.encode(t, img, m, Phase::inference);
    auto q = codec.quantize_latent(t, enc.latent, enc.pyramid.top());
    auto dec = codec.decode(t, q.quantized, enc.trace, enc.pyramid);
    const auto& out = dec.output.value().data;
    const auto& pre = dec.before_copy.value().data;
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (m.values[i % m.size()]) {
        CHECK(out[i] == pre[i]);
      } else if (out[i] != img.data[i]) {
        FAIL("pixel " << i << " changed");
      }
    }
  }
}

TEST_CASE("defective latent cells ignore defective pixel contents") {
  DefectFreeCodec codec(CodecConfig{}, 6);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor img = random_image(rng);
    const Mask m = codec_mask(rng, codec);
    const Tensor other = scramble(rng, img, m);
    for (Phase phase : {Phase::training, Phase::inference}) {
      Tape t(false);
      auto a = codec.encode(t, img, m, phase);
      auto b = codec.encode(t, other, m, phase);
      const Mask& top = a.pyramid.top();
      const std::size_t hw = top.size();
      for (std::size_t i = 0; i < a.latent.size(); ++i)
        if (top.values[i % hw]) CHECK(a.latent.value().data[i] == b.latent.value().data[i]);
      auto qa = codec.quantize_latent(t, a.latent, top);
      auto qb = codec.quantize_latent(t, b.latent, top);
      for (std::size_t p = 0; p < hw; ++p)
        if (top.values[p]) CHECK(qa.tokens.tokens[p] == qb.tokens.tokens[p]);
    }
  }
}

TEST_CASE("without relative estimation and symmetric connections the codec is a plain VQGAN") {
  CodecConfig c;
  c.use_relative_estimation = false;
  c.use_symmetrical_connection = false;
  DefectFreeCodec codec(c, 9);
  Rng rng(2);
  const Tensor img = random_image(rng);
  const Mask m = codec_mask(rng, codec);
  Tape t(false);
  auto masked = codec.encode(t, img, m, Phase::training);
  auto plain = codec.encode(t, img, Mask(32, 32), Phase::training);
  CHECK(masked.latent.value().data == plain.latent.value().data);
  auto q = codec.quantize_latent(t, masked.latent, masked.pyramid.top());
  auto dec = codec.decode(t, q.quantized, masked.trace, masked.pyramid);
  CHECK(dec.output.value().data == dec.before_copy.value().data);
}

TEST_CASE("inference can route every cell through the defect-free path") {
  CodecConfig c;
  c.inference_plain_path = false;
  DefectFreeCodec codec(c, 3);
  Rng rng(5);
  const Tensor img = random_image(rng);
  const Mask m = codec_mask(rng, codec);
  const Tensor other = scramble(rng, img, m);
  Tape t(false);
  auto a = codec.encode(t, img, m, Phase::inference);
  auto b = codec.encode(t, other, m, Phase::inference);
  CHECK(a.latent.value().data == b.latent.value().data);
}

TEST_CASE("codec training is deterministic and the adversarial term waits for warm-up") {
  auto run = [] {
    DefectFreeCodec codec(CodecConfig{}, 21);
    CodecTrainOptions opts;
    opts.steps = 8;
    CodecTrainer trainer(codec, opts, 21);
    Rng rng(1);
    std::vector<CodecExample> batch;
    for (int i = 0; i < 2; ++i) batch.push_back({random_image(rng), codec_mask(rng, codec)});
    std::vector<CodecStepMetrics> out;
    for (int s = 0; s < 3; ++s) {
      const bool active = trainer.gan_active();
      out.push_back(trainer.step(batch));
      CHECK(active == (s >= 2));
    }
    return out;
  };
  const auto a = run(), b = run();
  for (std::size_t s = 0; s < a.size(); ++s) {
    CHECK(a[s].total == b[s].total);
    CHECK(a[s].disc_loss == b[s].disc_loss);
    CHECK(a[s].usage == b[s].usage);
  }
  CHECK(a[0].gan_contribution == 0.0);
  CHECK(a[1].gan_contribution == 0.0);
  CHECK(a[2].gan_contribution != 0.0);
  CHECK(a[0].total == Approx(a[0].vq + a[0].perceptual).epsilon(1e-12));
}

TEST_CASE("codec checkpoints round-trip byte for byte") {
  const fs::path dir = fs::temp_directory_path() / "dfinpaint_codec_ckpt";
  fs::create_directories(dir);
  DefectFreeCodec codec(CodecConfig{}, 44);
  save_codec(dir / "a.ckpt", codec, 44, 7);
  DefectFreeCodec back = load_codec(dir / "a.ckpt");
  save_codec(dir / "b.ckpt", back, 44, 7);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  CHECK(to_json(back.config()) == to_json(codec.config()));
  for (const auto& [name, t] : codec.params().all()) {
    const Tensor& u = back.params().get(name);
    for (std::size_t i = 0; i < t.size(); ++i)
      CHECK(u.data[i] == static_cast<double>(static_cast<float>(t.data[i])));
  }
  CHECK_THROWS_AS(load_token_model(dir / "a.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("feature net pools to one value per output channel") {
  FeatureNet net(0x51ED5EED);
  Rng a(1), b(1);
  const auto f = net.pooled(random_image(a));
  CHECK(f.size() == 32);
  CHECK(f == net.pooled(random_image(b)));
}
