// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfinpaint/adam.hpp"
#include "dfinpaint/masked_ops.hpp"
#include "dfinpaint/params.hpp"

namespace dfi {

struct CodecConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::vector<std::size_t> widths{16, 32, 64};
  std::vector<std::size_t> strides{2, 2, 2};
  std::size_t codebook_size = 64;
  std::size_t code_dim = 32;
  std::size_t norm_groups = 1;
  double norm_eps = 1e-5;
  std::size_t attention_heads = 1;
  // Mixing coefficient per level 0..T-1; level 0 must be kExactCopy.
  std::vector<double> tau{kExactCopy, 1.0, 1.0};
  bool use_relative_estimation = true;
  bool use_symmetrical_connection = true;
  bool inference_plain_path = true;
  double perceptual_weight = 1.0;
  double gan_weight = 0.1;
  double gan_warmup_ratio = 0.25;
  std::uint64_t perceptual_seed = 0x51ED5EEDull;

  std::size_t levels() const { return widths.size(); }

  std::size_t latent_size() const {
    std::size_t s = image_size;
    for (std::size_t st : strides) s /= st;
    return s;
  }

  std::size_t level_size(std::size_t level) const {
    std::size_t s = image_size;
    for (std::size_t i = 0; i < level; ++i) s /= strides[i];
    return s;
  }

  std::size_t level_channels(std::size_t level) const { return level == 0 ? channels : widths[level - 1]; }

  void validate() const {
    if (widths.empty() || widths.size() != strides.size()) {
      throw ParameterError("codec config: widths and strides must be non-empty and equal length");
    }
    if (tau.size() != widths.size()) throw ParameterError("codec config: tau needs one entry per level");
    if (!std::isinf(tau[0])) throw ParameterError("codec config: tau[0] must be the exact-copy sentinel");
    for (std::size_t i = 1; i < tau.size(); ++i) {
      if (!(tau[i] >= 0.0) || std::isinf(tau[i])) throw ParameterError("codec config: interior tau must be finite and >= 0");
    }
    if (codebook_size < 2) throw ParameterError("codec config: codebook_size must be >= 2");
    if (code_dim == 0 || channels == 0) throw ParameterError("codec config: zero dimension");
    std::size_t s = image_size;
    for (std::size_t st : strides) {
      if (st == 0 || s % st != 0) throw ParameterError("codec config: image size not divisible by strides");
      s /= st;
    }
    for (std::size_t w : widths) {
      if (w % norm_groups != 0) throw ParameterError("codec config: widths must divide into norm groups");
    }
    if (widths.back() % attention_heads != 0) throw ParameterError("codec config: attention heads");
  }

  // Reference 256x256 -> 32x32, 8192-entry layout. Not trained by the tests.
  static CodecConfig full_scale() {
    CodecConfig c;
    c.image_size = 256;
    c.widths = {128, 256, 512};
    c.codebook_size = 8192;
    c.code_dim = 256;
    c.norm_groups = 32;
    return c;
  }
};

inline nlohmann::json tau_to_json(const std::vector<double>& tau) {
  nlohmann::json out = nlohmann::json::array();
  for (double t : tau) {
    if (std::isinf(t)) {
      out.push_back("inf");
    } else {
      out.push_back(t);
    }
  }
  return out;
}

inline std::vector<double> tau_from_json(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& v : j) {
    if (v.is_string()) {
      if (v.get<std::string>() != "inf") throw ParameterError("tau: only \"inf\" is accepted as a string");
      out.push_back(kExactCopy);
    } else {
      out.push_back(v.get<double>());
    }
  }
  return out;
}

inline nlohmann::json to_json(const CodecConfig& c) {
  return {{"image_size", c.image_size},
          {"channels", c.channels},
          {"widths", c.widths},
          {"strides", c.strides},
          {"codebook_size", c.codebook_size},
          {"code_dim", c.code_dim},
          {"norm_groups", c.norm_groups},
          {"norm_eps", c.norm_eps},
          {"attention_heads", c.attention_heads},
          {"tau", tau_to_json(c.tau)},
          {"use_relative_estimation", c.use_relative_estimation},
          {"use_symmetrical_connection", c.use_symmetrical_connection},
          {"inference_plain_path", c.inference_plain_path},
          {"perceptual_weight", c.perceptual_weight},
          {"gan_weight", c.gan_weight},
          {"gan_warmup_ratio", c.gan_warmup_ratio},
          {"perceptual_seed", c.perceptual_seed}};
}

inline CodecConfig codec_config_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.strides = j.at("strides").get<std::vector<std::size_t>>();
  c.codebook_size = j.at("codebook_size");
  c.code_dim = j.at("code_dim");
  c.norm_groups = j.at("norm_groups");
  c.norm_eps = j.at("norm_eps");
  c.attention_heads = j.at("attention_heads");
  c.tau = tau_from_json(j.at("tau"));
  c.use_relative_estimation = j.at("use_relative_estimation");
  c.use_symmetrical_connection = j.at("use_symmetrical_connection");
  c.inference_plain_path = j.at("inference_plain_path");
  c.perceptual_weight = j.at("perceptual_weight");
  c.gan_weight = j.at("gan_weight");
  c.gan_warmup_ratio = j.at("gan_warmup_ratio");
  c.perceptual_seed = j.at("perceptual_seed");
  c.validate();
  return c;
}

/// Discrete latent grid plus the latent-level defect mask.
struct TokenGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> tokens;
  Mask latent_mask;

  std::size_t size() const { return tokens.size(); }
};

/// Encoder states h_0..h_T kept for the decoder's symmetrical connections.
struct EncodeTrace {
  std::vector<Var> hidden;
};

enum class Phase { training, inference };

struct QuantizeResult {
  TokenGrid tokens;
  Var quantized;        // B[tokens]; gradient passes straight through to z
  Var codebook_term;    // mean over cells of |sg[z] - B[tokens]|^2
  Var commitment_term;  // mean over cells of |z - sg[B[tokens]]|^2
};

/// Nearest-code assignment of every latent cell (ties -> lowest index).
inline QuantizeResult quantize(Var z, Var codebook, const Mask& latent_mask) {
  detail::require_rank("quantize", z.value(), 4);
  detail::require_rank("quantize", codebook.value(), 2);
  const std::size_t d = z.shape()[1], h = z.shape()[2], w = z.shape()[3], hw = h * w;
  const std::size_t k = codebook.shape()[0];
  if (z.shape()[0] != 1) throw DimensionError("quantize: batch must be 1");
  if (codebook.shape()[1] != d) {
    throw DimensionError("quantize: latent dim " + std::to_string(d) + " vs codebook dim " +
                         std::to_string(codebook.shape()[1]));
  }
  if (latent_mask.height != h || latent_mask.width != w) throw DimensionError("quantize: latent mask dims");
  const auto& zv = z.value().data;
  const auto& bv = codebook.value().data;
  QuantizeResult r;
  r.tokens.height = h;
  r.tokens.width = w;
  r.tokens.latent_mask = latent_mask;
  r.tokens.tokens.resize(hw);
  Tensor q(z.shape());
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = zv[c * hw + p] - bv[j * d + c];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = j;
      }
    }
    r.tokens.tokens[p] = static_cast<int>(best);
    for (std::size_t c = 0; c < d; ++c) q.data[c * hw + p] = bv[best * d + c];
  }
  r.quantized = z.tape->record("quantize_st", std::move(q), {z}, [z](Tape& t, const std::vector<double>& g) {
    if (!t.requires_grad(z)) return;
    auto& gz = t.grad_buffer(z);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
  });
  Var codes = embedding(codebook, r.tokens.tokens);
  Var rows = map_to_rows(z);
  const double inv_cells = 1.0 / static_cast<double>(hw);
  r.codebook_term = scale(sum(square(sub(detach(rows), codes))), inv_cells);
  r.commitment_term = scale(sum(square(sub(rows, detach(codes)))), inv_cells);
  return r;
}

/// The defect-free codec: dual-path encoder, codebook, symmetric decoder.
///
/// Encoder level i (stride s, kernel s, no padding) maps h_{i-1} to h_i:
///   below the top: conv -> SiLU -> 1x1 conv -> SiLU
///   top level:     conv -> norm -> SiLU -> self-attention (residual) -> 1x1 conv to code_dim
/// The plain path uses conv2d / group norm / attention over every position.
/// The defect-free path swaps in df_conv2d, df_norm and masked attention
/// keyed on the cells whose whole footprint is defective. Because the
/// downsampling kernel equals its stride, a cell flagged clean in the mask
/// pyramid only ever sees clean pixels below the top level.
class DefectFreeCodec {
 public:
  struct Encoding {
    Var latent;
    EncodeTrace trace;
    MaskPyramid pyramid;
  };

  struct Decoding {
    Var before_copy;  // decoder output prior to the level-0 merge
    Var output;
  };

  DefectFreeCodec(CodecConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t t = config_.levels();
    for (std::size_t i = 1; i <= t; ++i) {
      const std::string pre = "enc" + std::to_string(i);
      const std::size_t in = config_.level_channels(i - 1), out = config_.level_channels(i);
      add_conv(params_, pre + ".down", in, out, config_.strides[i - 1], rng);
      if (i < t) {
        add_conv(params_, pre + ".mix", out, out, 1, rng);
      } else {
        add_norm(params_, pre + ".norm", out);
        add_attention(params_, pre + ".attn", out, rng);
        add_conv(params_, pre + ".out", out, config_.code_dim, 1, rng);
      }
    }
    const double cb = 1.0 / static_cast<double>(config_.codebook_size);
    params_.add_range("codebook", Shape{config_.codebook_size, config_.code_dim}, -cb, cb, rng);
    add_conv(params_, "dec.in", config_.code_dim, config_.widths.back(), 1, rng);
    add_attention(params_, "dec.attn", config_.widths.back(), rng);
    for (std::size_t i = t; i >= 1; --i) {
      const std::string pre = "dec" + std::to_string(i);
      const std::size_t in = config_.level_channels(i), out = config_.level_channels(i - 1);
      add_norm(params_, pre + ".norm", in);
      add_conv(params_, pre + ".conv", in, out, 3, rng);
      if (i > 1) {
        add_norm(params_, pre + ".refine_norm", out);
        add_conv(params_, pre + ".refine", out, out, 3, rng);
      }
    }
  }

  const CodecConfig& config() const { return config_; }
  CodecConfig& mutable_config() { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  MaskPyramid mask_pyramid(const Mask& mask) const {
    MaskPyramid pyr;
    pyr.levels.push_back(mask);
    for (std::size_t s : config_.strides) pyr.levels.push_back(mask_downsample(pyr.levels.back(), s));
    return pyr;
  }

  // False when the defect-free top level would see fewer than two valid
  // elements per normalization group.
  bool accepts_mask(const Mask& mask) const {
    if (mask.height != config_.image_size || mask.width != config_.image_size) return false;
    const MaskPyramid pyr = mask_pyramid(mask);
    const std::size_t t = config_.levels();
    const Mask hole = mask_fully_defective(pyr.levels[t - 1], config_.strides[t - 1]);
    const std::size_t valid_cells = hole.size() - hole.defective_count();
    return valid_cells * (config_.widths.back() / config_.norm_groups) >= 2;
  }

  /// h_i = plain_i(h_{i-1}) on clean cells of m_i and defect_free_i(h_{i-1}, m_{i-1})
  /// on defective cells. `image` is [C, H, W] or [1, C, H, W].
  Encoding encode(Tape& tape, const Tensor& image, const Mask& mask, Phase phase) {
    const Binding p{tape, params_, tape.grad_enabled()};
    const std::size_t s = config_.image_size, c = config_.channels;
    if (image.size() != c * s * s) {
      throw DimensionError("encode: image shape " + to_string(image.shape) + " does not match codec " +
                           std::to_string(c) + "x" + std::to_string(s) + "x" + std::to_string(s));
    }
    if (mask.height != s || mask.width != s) throw DimensionError("encode: mask dims do not match image");
    Encoding enc;
    enc.pyramid.levels.push_back(mask);
    Var h = tape.constant(Tensor(Shape{1, c, s, s}, image.data));
    enc.trace.hidden.push_back(h);
    const bool defect_free_only = phase == Phase::inference && !config_.inference_plain_path;
    for (std::size_t i = 1; i <= config_.levels(); ++i) {
      const Mask& prev = enc.pyramid.levels.back();
      Mask next = mask_downsample(prev, config_.strides[i - 1]);
      Var plain = level(p, i, h, nullptr);
      if (prev.any() && config_.use_relative_estimation) {
        Var defect_free = level(p, i, h, &prev);
        h = defect_free_only ? defect_free : select_by_mask(plain, defect_free, next);
      } else {
        h = plain;
      }
      enc.pyramid.levels.push_back(std::move(next));
      enc.trace.hidden.push_back(h);
    }
    enc.latent = h;
    return enc;
  }

  QuantizeResult quantize_latent(Tape& tape, Var latent, const Mask& latent_mask) {
    const Binding p{tape, params_, tape.grad_enabled()};
    return quantize(latent, p("codebook"), latent_mask);
  }

  /// Symmetric upsampling from the top state h^_T (shape [1, code_dim, h, w]).
  Decoding decode(Tape& tape, Var top, const EncodeTrace& trace, const MaskPyramid& pyramid) {
    const std::size_t t = config_.levels();
    if (trace.hidden.size() != t + 1 || pyramid.levels.size() != t + 1) {
      throw DimensionError("decode: trace/pyramid do not have " + std::to_string(t + 1) + " levels");
    }
    const Binding p{tape, params_, tape.grad_enabled()};
    Var cur = apply_conv(p, "dec.in", top, 1, 0);
    cur = add(cur, attention_block(p, "dec.attn", cur, nullptr));
    Decoding out;
    for (std::size_t i = t; i >= 1; --i) {
      const std::string pre = "dec" + std::to_string(i);
      const Mask empty(cur.shape()[2], cur.shape()[3]);
      Var y = channel_affine(df_norm(cur, empty, config_.norm_groups, config_.norm_eps), p(pre + ".norm.gamma"),
                             p(pre + ".norm.beta"));
      y = nearest_upsample(silu(y), config_.strides[i - 1]);
      y = apply_conv(p, pre + ".conv", y, 1, 1);
      if (i > 1) {
        const Mask empty_out(y.shape()[2], y.shape()[3]);
        Var r = channel_affine(df_norm(y, empty_out, config_.norm_groups, config_.norm_eps),
                               p(pre + ".refine_norm.gamma"), p(pre + ".refine_norm.beta"));
        y = add(y, apply_conv(p, pre + ".refine", silu(r), 1, 1));
      }
      const Var& encoded = trace.hidden[i - 1];
      if (encoded.shape() != y.shape()) throw DimensionError("decode: trace level shape mismatch");
      if (i == 1) out.before_copy = y;
      if (config_.use_symmetrical_connection) {
        y = symmetric_mix(y, encoded, pyramid.levels[i - 1], config_.tau[i - 1]);
      }
      cur = y;
    }
    out.output = cur;
    return out;
  }

  Decoding decode_tokens(Tape& tape, const TokenGrid& tokens, const EncodeTrace& trace,
                         const MaskPyramid& pyramid) {
    const Binding p{tape, params_, tape.grad_enabled()};
    for (int tok : tokens.tokens) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= config_.codebook_size) {
        throw DimensionError("decode: token " + std::to_string(tok) + " outside codebook");
      }
    }
    Var rows = embedding(p("codebook"), tokens.tokens);
    return decode(tape, rows_to_map(rows, tokens.height, tokens.width), trace, pyramid);
  }

 private:
  Var attention_block(const Binding& p, const std::string& prefix, Var x, const Mask* key_mask) {
    const std::size_t h = x.shape()[2], w = x.shape()[3];
    Var rows = map_to_rows(x);
    std::span<const std::uint8_t> keys;
    if (key_mask != nullptr) keys = key_mask->values;
    return rows_to_map(apply_attention(p, prefix, rows, rows, keys, config_.attention_heads, false), h, w);
  }

  // One encoder step. in_mask == nullptr selects the plain path.
  Var level(const Binding& p, std::size_t i, Var in, const Mask* in_mask) {
    const std::string pre = "enc" + std::to_string(i);
    const std::size_t stride = config_.strides[i - 1];
    Var y;
    Mask empty_cells;
    if (in_mask != nullptr) {
      y = df_conv2d(in, *in_mask, p(pre + ".down.w"), p(pre + ".down.b"), stride, 0);
      empty_cells = mask_fully_defective(*in_mask, stride);
    } else {
      y = apply_conv(p, pre + ".down", in, stride, 0);
      empty_cells = Mask(y.shape()[2], y.shape()[3]);
    }
    if (i < config_.levels()) {
      return silu(apply_conv(p, pre + ".mix", silu(y), 1, 0));
    }
    y = df_norm(y, empty_cells, config_.norm_groups, config_.norm_eps);
    y = silu(channel_affine(y, p(pre + ".norm.gamma"), p(pre + ".norm.beta")));
    y = add(y, attention_block(p, pre + ".attn", y, in_mask != nullptr ? &empty_cells : nullptr));
    return apply_conv(p, pre + ".out", y, 1, 0);
  }

  CodecConfig config_;
  ParamStore params_;
};

/// Fixed, randomly initialized 3-layer CNN used as the perceptual feature
/// extractor and as the feature map for Frechet scoring. Never trained.
class FeatureNet {
 public:
  explicit FeatureNet(std::uint64_t seed, std::size_t channels = 3) {
    Rng rng(seed);
    add_conv(params_, "q1", channels, 16, 3, rng);
    add_conv(params_, "q2", 16, 32, 3, rng);
    add_conv(params_, "q3", 32, 32, 3, rng);
  }

  Var features(Tape& tape, Var image) {
    const Binding p{tape, params_, false};
    Var y = relu(apply_conv(p, "q1", image, 2, 1));
    y = relu(apply_conv(p, "q2", y, 2, 1));
    return apply_conv(p, "q3", y, 2, 1);
  }

  // Spatially averaged final-layer activations of a [C, H, W] image.
  std::vector<double> pooled(const Tensor& image) {
    Tape tape(false);
    const std::size_t c = image.shape.size() == 4 ? image.shape[1] : image.shape[0];
    const std::size_t h = image.shape[image.rank() - 2], w = image.shape[image.rank() - 1];
    Var f = features(tape, tape.constant(Tensor(Shape{1, c, h, w}, image.data)));
    const std::size_t ch = f.shape()[1], hw = f.shape()[2] * f.shape()[3];
    std::vector<double> out(ch, 0.0);
    for (std::size_t k = 0; k < ch; ++k) {
      for (std::size_t i = 0; i < hw; ++i) out[k] += f.value().data[k * hw + i];
      out[k] /= static_cast<double>(hw);
    }
    return out;
  }

 private:
  ParamStore params_;
};

/// Three-layer patch discriminator; returns per-patch logits.
class PatchDiscriminator {
 public:
  PatchDiscriminator(std::uint64_t seed, std::size_t channels = 3) {
    Rng rng(seed);
    add_conv(params_, "d1", channels, 16, 3, rng);
    add_conv(params_, "d2", 16, 32, 3, rng);
    add_conv(params_, "d3", 32, 1, 3, rng);
  }

  Var logits(const Binding& p, Var image) {
    Var y = leaky_relu(apply_conv(p, "d1", image, 2, 1));
    y = leaky_relu(apply_conv(p, "d2", y, 2, 1));
    return apply_conv(p, "d3", y, 1, 1);
  }

  ParamStore& params() { return params_; }

 private:
  ParamStore params_;
};

struct VqLosses {
  Var reconstruction;  // |I - I^|^2 (mean over pixels)
  Var vq;              // reconstruction + codebook + commitment
  Var perceptual;      // |Q(I) - Q(I^)|^2 (mean over features)
  Var adversarial;     // log D(I) + log(1 - D(I^)), averaged over patches
  Var generator_adv;   // -log D(I^), the non-saturating generator form
};

inline VqLosses vq_losses(Var image, Var reconstruction, Var codebook_term, Var commitment_term,
                          Var features_real, Var features_fake, Var disc_real_logits,
                          Var disc_fake_logits) {
  VqLosses l;
  l.reconstruction = mse(image, reconstruction);
  l.vq = add(add(l.reconstruction, codebook_term), commitment_term);
  l.perceptual = mse(features_real, features_fake);
  l.adversarial = add(mean(log_sigmoid(disc_real_logits)), mean(log_sigmoid(scale(disc_fake_logits, -1.0))));
  l.generator_adv = scale(mean(log_sigmoid(disc_fake_logits)), -1.0);
  for (Var v : {l.vq, l.perceptual, l.adversarial, l.generator_adv}) {
    if (!std::isfinite(v.item())) throw NumericError("vq_losses: non-finite loss");
  }
  return l;
}

struct CodecExample {
  Tensor image;  // [C, H, W] in [0, 1]
  Mask mask;
};

struct CodecTrainOptions {
  std::size_t steps = 2000;
  double lr = 1e-3;
  double disc_lr = 1e-3;
  double warmup_ratio = 0.05;
};

struct CodecStepMetrics {
  std::int64_t step = 0;
  double vq = 0.0;
  double perceptual = 0.0;
  double adversarial = 0.0;
  double total = 0.0;            // generator objective actually minimized
  double gan_contribution = 0.0; // weighted adversarial term inside `total`
  double reconstruction_mse = 0.0;
  double disc_loss = 0.0;
  std::size_t codes_used = 0;
  std::vector<std::size_t> usage;
};

/// Alternating generator / discriminator Adam updates on L1 = L^V + L^P + L^G.
class CodecTrainer {
 public:
  CodecTrainer(DefectFreeCodec& codec, CodecTrainOptions options, std::uint64_t seed)
      : codec_(codec),
        options_(options),
        features_(codec.config().perceptual_seed, codec.config().channels),
        disc_(seed ^ 0xD15Cull, codec.config().channels) {
    gen_opt_.lr = options.lr;
    disc_opt_.lr = options.disc_lr;
  }

  std::int64_t steps_done() const { return step_; }

  bool gan_active() const {
    const double warmup = codec_.config().gan_warmup_ratio * static_cast<double>(options_.steps);
    return static_cast<double>(step_) >= warmup;
  }

  CodecStepMetrics step(std::span<const CodecExample> batch) {
    if (batch.empty()) throw ParameterError("train_codec_step: empty batch");
    const CodecConfig& cfg = codec_.config();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const double gan_w = gan_active() ? cfg.gan_weight : 0.0;
    CodecStepMetrics m;
    m.usage.assign(cfg.codebook_size, 0);
    std::vector<Tensor> fakes;

    codec_.params().zero_grad();
    {
      Tape tape;
      Binding disc{tape, disc_.params(), false};
      std::vector<Var> terms;
      for (const CodecExample& ex : batch) {
        auto enc = codec_.encode(tape, ex.image, ex.mask, Phase::training);
        auto q = codec_.quantize_latent(tape, enc.latent, enc.pyramid.top());
        auto dec = codec_.decode(tape, q.quantized, enc.trace, enc.pyramid);
        Var img = enc.trace.hidden[0];
        VqLosses l = vq_losses(img, dec.output, q.codebook_term, q.commitment_term,
                               features_.features(tape, img), features_.features(tape, dec.output),
                               disc_.logits(disc, img), disc_.logits(disc, dec.output));
        Var objective = add(l.vq, scale(l.perceptual, cfg.perceptual_weight));
        if (gan_w != 0.0) objective = add(objective, scale(l.generator_adv, gan_w));
        terms.push_back(objective);
        m.vq += l.vq.item() * inv_b;
        m.perceptual += l.perceptual.item() * inv_b;
        m.adversarial += l.adversarial.item() * inv_b;
        m.gan_contribution += gan_w * l.generator_adv.item() * inv_b;
        m.reconstruction_mse += l.reconstruction.item() * inv_b;
        for (int t : q.tokens.tokens) ++m.usage[static_cast<std::size_t>(t)];
        fakes.emplace_back(dec.output.shape(), dec.output.value().data);
      }
      Var loss = scale(sum_all(terms), inv_b);
      m.total = loss.item();
      tape.backward(loss);
    }
    const auto warm = static_cast<std::int64_t>(std::ceil(options_.warmup_ratio * static_cast<double>(options_.steps)));
    gen_opt_.lr = warmup_lr(options_.lr, step_, warm);
    auto gen_params = codec_.params().pointers();
    adam_step(gen_params, gen_opt_);

    disc_.params().zero_grad();
    {
      Tape tape;
      Binding disc{tape, disc_.params(), true};
      std::vector<Var> terms;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor& img = batch[i].image;
        Var real = tape.constant(Tensor(fakes[i].shape, img.data));
        Var fake = tape.constant(std::move(fakes[i]));
        Var objective = add(mean(log_sigmoid(disc_.logits(disc, real))),
                            mean(log_sigmoid(scale(disc_.logits(disc, fake), -1.0))));
        terms.push_back(scale(objective, -1.0));
      }
      Var loss = scale(sum_all(terms), inv_b);
      m.disc_loss = loss.item();
      tape.backward(loss);
    }
    disc_opt_.lr = warmup_lr(options_.disc_lr, step_, warm);
    auto disc_params = disc_.params().pointers();
    adam_step(disc_params, disc_opt_);

    ++step_;
    m.step = step_;
    for (std::size_t u : m.usage) m.codes_used += u != 0;
    return m;
  }

 private:
  static Var sum_all(const std::vector<Var>& terms) {
    Var acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
  }

  DefectFreeCodec& codec_;
  CodecTrainOptions options_;
  FeatureNet features_;
  PatchDiscriminator disc_;
  AdamState gen_opt_;
  AdamState disc_opt_;
  std::int64_t step_ = 0;
};

/// Mean squared reconstruction error of training-phase round trips.
inline double reconstruction_mse(DefectFreeCodec& codec, std::span<const CodecExample> examples) {
  double total = 0.0;
  for (const CodecExample& ex : examples) {
    Tape tape(false);
    auto enc = codec.encode(tape, ex.image, ex.mask, Phase::training);
    auto q = codec.quantize_latent(tape, enc.latent, enc.pyramid.top());
    auto dec = codec.decode(tape, q.quantized, enc.trace, enc.pyramid);
    total += mse(enc.trace.hidden[0], dec.output).item();
  }
  return total / static_cast<double>(examples.size());
}

/// Token histogram over a set of training-phase encodings.
inline std::vector<std::size_t> codebook_usage(DefectFreeCodec& codec, std::span<const CodecExample> examples) {
  std::vector<std::size_t> hist(codec.config().codebook_size, 0);
  for (const CodecExample& ex : examples) {
    Tape tape(false);
    auto enc = codec.encode(tape, ex.image, ex.mask, Phase::training);
    auto q = codec.quantize_latent(tape, enc.latent, enc.pyramid.top());
    for (int t : q.tokens.tokens) ++hist[static_cast<std::size_t>(t)];
  }
  return hist;
}

}  // namespace dfi
