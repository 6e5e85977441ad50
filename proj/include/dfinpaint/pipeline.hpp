// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfinpaint/checkpoint.hpp"
#include "dfinpaint/dataset.hpp"
#include "dfinpaint/df_vqgan.hpp"
#include "dfinpaint/frechet.hpp"
#include "dfinpaint/image_io.hpp"
#include "dfinpaint/mp_s2s.hpp"

namespace dfi {

/// Flat run configuration. Every key is optional in the JSON file; unknown
/// keys are rejected.
struct RunConfig {
  std::size_t image_size = 32;
  std::size_t dataset_size = 500;

  std::size_t codec_steps = 2000;
  std::size_t codec_batch = 8;
  double codec_lr = 1e-3;
  double codec_warmup_ratio = 0.05;
  std::size_t codebook_size = 64;
  std::size_t code_dim = 32;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t norm_groups = 1;
  double perceptual_weight = 1.0;
  double gan_weight = 0.1;
  double gan_warmup_ratio = 0.25;
  std::uint64_t feature_seed = 0x51ED5EEDull;
  bool use_relative_estimation = true;
  bool use_symmetrical_connection = true;
  bool inference_plain_path = true;

  std::size_t s2s_steps = 1500;
  std::size_t s2s_batch = 8;
  double s2s_lr = 1e-3;
  double s2s_warmup_ratio = 0.05;
  std::size_t masks_per_image = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t patch_size = 4;
  std::size_t max_text_len = 8;
  double dropout = 0.1;
  bool use_text = true;
  bool use_low = true;
  bool use_high = true;

  std::size_t log_every = 100;
};

namespace detail {

template <typename T>
void bind_key(std::map<std::string, std::function<void(const nlohmann::json&)>>& table, const char* key, T& field) {
  table[key] = [&field, key](const nlohmann::json& v) {
    try {
      field = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError(std::string("config key '") + key + "': " + e.what());
    }
  };
}

template <typename Fn>
void for_each_key(RunConfig& c, Fn&& fn) {
  fn("image_size", c.image_size);
  fn("dataset_size", c.dataset_size);
  fn("codec_steps", c.codec_steps);
  fn("codec_batch", c.codec_batch);
  fn("codec_lr", c.codec_lr);
  fn("codec_warmup_ratio", c.codec_warmup_ratio);
  fn("codebook_size", c.codebook_size);
  fn("code_dim", c.code_dim);
  fn("widths", c.widths);
  fn("norm_groups", c.norm_groups);
  fn("perceptual_weight", c.perceptual_weight);
  fn("gan_weight", c.gan_weight);
  fn("gan_warmup_ratio", c.gan_warmup_ratio);
  fn("feature_seed", c.feature_seed);
  fn("use_relative_estimation", c.use_relative_estimation);
  fn("use_symmetrical_connection", c.use_symmetrical_connection);
  fn("inference_plain_path", c.inference_plain_path);
  fn("s2s_steps", c.s2s_steps);
  fn("s2s_batch", c.s2s_batch);
  fn("s2s_lr", c.s2s_lr);
  fn("s2s_warmup_ratio", c.s2s_warmup_ratio);
  fn("masks_per_image", c.masks_per_image);
  fn("model_dim", c.model_dim);
  fn("heads", c.heads);
  fn("encoder_layers", c.encoder_layers);
  fn("decoder_layers", c.decoder_layers);
  fn("patch_size", c.patch_size);
  fn("max_text_len", c.max_text_len);
  fn("dropout", c.dropout);
  fn("use_text", c.use_text);
  fn("use_low", c.use_low);
  fn("use_high", c.use_high);
  fn("log_every", c.log_every);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParameterError("config: top level must be a JSON object");
  RunConfig c;
  std::map<std::string, std::function<void(const nlohmann::json&)>> table;
  detail::for_each_key(c, [&table](const char* key, auto& field) { detail::bind_key(table, key, field); });
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ParameterError("config: unknown key '" + key + "'");
    it->second(value);
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& config) {
  RunConfig c = config;
  nlohmann::json j = nlohmann::json::object();
  detail::for_each_key(c, [&j](const char* key, auto& field) { j[key] = field; });
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return run_config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParameterError("config " + path.string() + ": " + e.what());
  }
}

/// Names accepted by --ablate.
inline void apply_ablation(RunConfig& c, const std::string& name) {
  if (name == "sym_conn") {
    c.use_symmetrical_connection = false;
  } else if (name == "rel_est") {
    c.use_relative_estimation = false;
  } else if (name == "text") {
    c.use_text = false;
  } else if (name == "low") {
    c.use_low = false;
  } else if (name == "high") {
    c.use_high = false;
  } else {
    throw ParameterError("unknown ablation '" + name + "' (expected sym_conn, rel_est, text, low, high)");
  }
}

inline CodecConfig make_codec_config(const RunConfig& r) {
  CodecConfig c;
  c.image_size = r.image_size;
  c.widths = r.widths;
  c.strides.assign(r.widths.size(), 2);
  c.tau.assign(r.widths.size(), 1.0);
  if (!c.tau.empty()) c.tau[0] = kExactCopy;
  c.codebook_size = r.codebook_size;
  c.code_dim = r.code_dim;
  c.norm_groups = r.norm_groups;
  c.perceptual_weight = r.perceptual_weight;
  c.gan_weight = r.gan_weight;
  c.gan_warmup_ratio = r.gan_warmup_ratio;
  c.perceptual_seed = r.feature_seed;
  c.use_relative_estimation = r.use_relative_estimation;
  c.use_symmetrical_connection = r.use_symmetrical_connection;
  c.inference_plain_path = r.inference_plain_path;
  c.validate();
  return c;
}

inline S2SConfig make_s2s_config(const RunConfig& r, const CodecConfig& codec, std::size_t vocab_size) {
  S2SConfig c;
  c.model_dim = r.model_dim;
  c.heads = r.heads;
  c.encoder_layers = r.encoder_layers;
  c.decoder_layers = r.decoder_layers;
  c.patch_size = r.patch_size;
  c.vocab_size = vocab_size;
  c.max_text_len = r.max_text_len;
  c.image_size = codec.image_size;
  c.channels = codec.channels;
  c.latent_size = codec.latent_size();
  c.codebook_size = codec.codebook_size;
  c.code_dim = codec.code_dim;
  c.dropout = r.dropout;
  c.use_text = r.use_text;
  c.use_low = r.use_low;
  c.use_high = r.use_high;
  c.validate();
  return c;
}

/// Mask from `rng` that the codec can encode (resampled otherwise).
inline Mask sample_codec_mask(Rng& rng, const DefectFreeCodec& codec, const BoundingBox& box) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Mask m = random_mask(rng, codec.config().image_size, box);
    if (codec.accepts_mask(m)) return m;
  }
  throw DegenerateInputError("could not sample an encodable mask in 100 attempts");
}

struct TrainingImage {
  Tensor image;
  BoundingBox bbox;
  std::string caption;
};

inline std::vector<TrainingImage> training_images(std::span<const DatasetItem> items) {
  std::vector<TrainingImage> out;
  for (const DatasetItem& it : items) out.push_back({it.sample.image, it.sample.bbox, it.sample.caption});
  return out;
}

/// Runs `steps` codec updates with freshly sampled masks every step.
inline void train_codec(DefectFreeCodec& codec, std::span<const TrainingImage> data, const RunConfig& rc,
                        std::uint64_t seed, const std::function<void(const CodecStepMetrics&)>& on_step) {
  if (data.empty()) throw ParameterError("train_codec: empty dataset");
  CodecTrainOptions opts;
  opts.steps = rc.codec_steps;
  opts.lr = rc.codec_lr;
  opts.disc_lr = rc.codec_lr;
  opts.warmup_ratio = rc.codec_warmup_ratio;
  CodecTrainer trainer(codec, opts, seed);
  Rng rng(seed ^ 0xC0DECull);
  for (std::size_t s = 0; s < rc.codec_steps; ++s) {
    std::vector<CodecExample> batch;
    for (std::size_t b = 0; b < rc.codec_batch; ++b) {
      const TrainingImage& item = data[rng.below(data.size())];
      batch.push_back({item.image, sample_codec_mask(rng, codec, item.bbox)});
    }
    const CodecStepMetrics m = trainer.step(batch);
    if (on_step) on_step(m);
  }
}

/// Tokens of `image` under `mask` in the given phase (no gradients).
inline QuantizeResult encode_tokens(DefectFreeCodec& codec, const Tensor& image, const Mask& mask, Phase phase) {
  Tape tape(false);
  auto enc = codec.encode(tape, image, mask, phase);
  return codec.quantize_latent(tape, enc.latent, enc.pyramid.top());
}

/// Token-model training pair from a clean image: targets are the tokens the
/// codec assigns during training, inputs are what inference will see.
inline S2SExample make_s2s_example(DefectFreeCodec& codec, const Vocab& vocab, const Tensor& image,
                                   const std::string& caption, const Mask& mask) {
  S2SExample ex;
  ex.targets = encode_tokens(codec, image, mask, Phase::training).tokens.tokens;
  ex.input.image = zero_fill(image, mask);
  ex.input.tokens = encode_tokens(codec, ex.input.image, mask, Phase::inference).tokens;
  ex.input.text = tokenize_text(caption, vocab);
  return ex;
}

inline std::vector<S2SExample> make_s2s_examples(DefectFreeCodec& codec, const Vocab& vocab,
                                                 std::span<const TrainingImage> data, std::size_t masks_per_image,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<S2SExample> out;
  for (const TrainingImage& item : data)
    for (std::size_t k = 0; k < masks_per_image; ++k)
      out.push_back(make_s2s_example(codec, vocab, item.image, item.caption, sample_codec_mask(rng, codec, item.bbox)));
  return out;
}

inline void train_s2s(MaskedTokenTransformer& model, std::span<const S2SExample> examples, const Tensor& codebook,
                      const RunConfig& rc, std::uint64_t seed,
                      const std::function<void(const S2SStepMetrics&)>& on_step) {
  if (examples.empty()) throw ParameterError("train_s2s: no examples");
  S2STrainOptions opts;
  opts.steps = rc.s2s_steps;
  opts.lr = rc.s2s_lr;
  opts.warmup_ratio = rc.s2s_warmup_ratio;
  S2STrainer trainer(model, opts, seed);
  Rng rng(seed ^ 0x5255ull);
  for (std::size_t s = 0; s < rc.s2s_steps; ++s) {
    std::vector<S2SExample> batch;
    for (std::size_t b = 0; b < rc.s2s_batch; ++b) batch.push_back(examples[rng.below(examples.size())]);
    const S2SStepMetrics m = trainer.step(batch, codebook);
    if (on_step) on_step(m);
  }
}

inline void check_compatible(const CodecConfig& codec, const S2SConfig& s2s) {
  if (codec.codebook_size != s2s.codebook_size || codec.code_dim != s2s.code_dim ||
      codec.latent_size() != s2s.latent_size || codec.image_size != s2s.image_size ||
      codec.channels != s2s.channels) {
    throw ParameterError("incompatible checkpoints: codec K=" + std::to_string(codec.codebook_size) + " d=" +
                         std::to_string(codec.code_dim) + " latent=" + std::to_string(codec.latent_size()) +
                         " vs token model K=" + std::to_string(s2s.codebook_size) + " d=" +
                         std::to_string(s2s.code_dim) + " latent=" + std::to_string(s2s.latent_size));
  }
}

struct InpaintResult {
  Tensor image;
  TokenGrid observed;   // z~
  TokenGrid completed;  // z^
};

/// encode (inference) -> quantize -> condition -> decode masked -> merge -> decode.
inline InpaintResult inpaint(DefectFreeCodec& codec, MaskedTokenTransformer& model, const Vocab& vocab,
                             const Tensor& image, const Mask& mask, const std::string& caption,
                             const DecodeOptions& opts) {
  check_compatible(codec.config(), model.config());
  if (!codec.accepts_mask(mask)) {
    throw DegenerateInputError("inpaint: mask leaves too few valid cells to normalize (" +
                               std::to_string(mask.defective_count()) + " of " + std::to_string(mask.size()) +
                               " pixels defective)");
  }
  const Tensor x = zero_fill(image, mask);
  Tape tape(false);
  auto enc = codec.encode(tape, x, mask, Phase::inference);
  auto q = codec.quantize_latent(tape, enc.latent, enc.pyramid.top());
  InpaintResult r;
  r.observed = q.tokens;
  const Tensor& codebook = codec.params().get("codebook");
  const S2SInput in{tokenize_text(caption, vocab), x, q.tokens};
  r.completed = MaskedTokenTransformer::merge_tokens(q.tokens, model.decode_masked_tokens(in, codebook, opts));
  auto dec = codec.decode_tokens(tape, r.completed, enc.trace, enc.pyramid);
  r.image = Tensor(Shape{image.shape[image.rank() - 3], mask.height, mask.width}, dec.output.value().data);
  return r;
}

// ---- checkpoints -----------------------------------------------------------

inline constexpr const char* kCodecMagic = "DFVQ";
inline constexpr const char* kTokenModelMagic = "MPS2";

inline void save_codec(const std::filesystem::path& path, const DefectFreeCodec& codec, std::uint64_t seed,
                       std::int64_t step) {
  save_checkpoint(path, kCodecMagic, to_json(codec.config()), seed, step, codec.params());
}

inline DefectFreeCodec load_codec(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path, kCodecMagic);
  DefectFreeCodec codec(codec_config_from_json(ck.config), ck.seed);
  codec.params().assign(ck.arrays);
  return codec;
}

struct TokenModelBundle {
  MaskedTokenTransformer model;
  Vocab vocab;
};

inline void save_token_model(const std::filesystem::path& path, const MaskedTokenTransformer& model,
                             const Vocab& vocab, std::uint64_t seed, std::int64_t step) {
  const nlohmann::json cfg = {{"model", to_json(model.config())}, {"vocab", vocab.to_json()}};
  save_checkpoint(path, kTokenModelMagic, cfg, seed, step, model.params());
}

inline TokenModelBundle load_token_model(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path, kTokenModelMagic);
  TokenModelBundle b{MaskedTokenTransformer(s2s_config_from_json(ck.config.at("model")), ck.seed),
                     Vocab::from_json(ck.config.at("vocab"))};
  b.model.params().assign(ck.arrays);
  return b;
}

// ---- evaluation ----------------------------------------------------------

struct EvalImageRecord {
  std::string name;
  std::optional<int> nondefective_max_abs_dev;  // 8-bit levels
  std::optional<double> masked_mse;
  std::optional<double> masked_psnr;  // empty when the MSE is 0
};

struct EvalReport {
  double frechet = 0.0;
  std::optional<int> nondefective_max_abs_dev;
  std::optional<double> masked_mse;
  std::optional<double> masked_psnr;
  std::vector<EvalImageRecord> images;
};

inline std::optional<double> psnr_from_mse(double mse) {
  if (mse <= 0.0) return std::nullopt;
  return 10.0 * std::log10(1.0 / mse);
}

/// Frechet distance of fixed-CNN features plus pixel-region metrics. `masks`
/// is empty or one mask per image pair.
inline EvalReport evaluate(std::span<const Tensor> generated, std::span<const Tensor> reference,
                           std::span<const Mask> masks, std::span<const std::string> names,
                           std::uint64_t feature_seed) {
  if (generated.size() != reference.size() || generated.empty()) {
    throw ParameterError("evaluate: need equal-size nonempty image sets (" + std::to_string(generated.size()) +
                         " vs " + std::to_string(reference.size()) + ")");
  }
  if (!masks.empty() && masks.size() != generated.size()) throw ParameterError("evaluate: one mask per image");
  FeatureNet net(feature_seed, generated[0].shape[0]);
  std::vector<std::vector<double>> fa, fb;
  EvalReport rep;
  double mse_sum = 0.0;
  std::size_t mse_count = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const Tensor& g = generated[i];
    const Tensor& r = reference[i];
    if (g.shape != r.shape) throw DimensionError("evaluate: image shapes differ for " + names[i]);
    fa.push_back(net.pooled(g));
    fb.push_back(net.pooled(r));
    EvalImageRecord rec;
    rec.name = names[i];
    if (!masks.empty()) {
      const Mask& m = masks[i];
      const std::size_t hw = m.size();
      if (g.size() % hw != 0) throw DimensionError("evaluate: mask does not match " + names[i]);
      const auto qa = quantize_8bit(g), qb = quantize_8bit(r);
      int dev = 0;
      double se = 0.0;
      std::size_t n = 0;
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (m.values[k % hw]) {
          se += (g.data[k] - r.data[k]) * (g.data[k] - r.data[k]);
          ++n;
        } else {
          dev = std::max(dev, std::abs(static_cast<int>(qa[k]) - static_cast<int>(qb[k])));
        }
      }
      rec.nondefective_max_abs_dev = dev;
      rep.nondefective_max_abs_dev = std::max(rep.nondefective_max_abs_dev.value_or(0), dev);
      if (n > 0) {
        rec.masked_mse = se / static_cast<double>(n);
        rec.masked_psnr = psnr_from_mse(*rec.masked_mse);
        mse_sum += *rec.masked_mse;
        ++mse_count;
      }
    }
    rep.images.push_back(std::move(rec));
  }
  rep.frechet = frechet_distance(fa, fb);
  if (mse_count > 0) {
    rep.masked_mse = mse_sum / static_cast<double>(mse_count);
    rep.masked_psnr = psnr_from_mse(*rep.masked_mse);
  }
  return rep;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
inline nlohmann::json optional_json(const std::optional<int>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& rec : r.images) {
    images.push_back({{"name", rec.name},
                      {"nondefective_max_abs_dev", optional_json(rec.nondefective_max_abs_dev)},
                      {"masked_mse", optional_json(rec.masked_mse)},
                      {"masked_psnr", optional_json(rec.masked_psnr)}});
  }
  return {{"frechet", r.frechet},
          {"nondefective_max_abs_dev", optional_json(r.nondefective_max_abs_dev)},
          {"masked_mse", optional_json(r.masked_mse)},
          {"masked_psnr", optional_json(r.masked_psnr)},
          {"images", images}};
}

}  // namespace dfi
