// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfinpaint/adam.hpp"
#include "dfinpaint/df_vqgan.hpp"
#include "dfinpaint/params.hpp"

namespace dfi {

/// Closed word-level vocabulary. Ids 0..2 are reserved.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kFirstWord = 3;

  Vocab() = default;

  // Explicit word -> id table; ids must fill [3, 3 + words) exactly.
  Vocab(std::map<std::string, int> ids, std::size_t max_len) : ids_(std::move(ids)), max_len_(max_len) {
    if (max_len_ == 0) throw ParameterError("vocab: max_len must be positive");
    std::vector<int> seen(ids_.size(), 0);
    for (const auto& [w, id] : ids_) {
      const int slot = id - kFirstWord;
      if (slot < 0 || slot >= static_cast<int>(ids_.size()) || seen[slot]++) {
        throw ParameterError("vocab: ids must be dense from 3 (word '" + w + "')");
      }
    }
  }

  // Sorted unique words of the given texts, numbered from 3.
  static Vocab from_texts(std::span<const std::string> texts, std::size_t max_len) {
    std::map<std::string, int> ids;
    for (const std::string& t : texts)
      for (const std::string& w : split_words(t)) ids.emplace(w, 0);
    int next = kFirstWord;
    for (auto& [w, id] : ids) id = next++;
    return Vocab(std::move(ids), max_len);
  }

  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  std::size_t size() const { return ids_.size() + kFirstWord; }
  std::size_t max_len() const { return max_len_; }
  const std::map<std::string, int>& words() const { return ids_; }

  nlohmann::json to_json() const { return {{"words", ids_}, {"max_len", max_len_}}; }

  static Vocab from_json(const nlohmann::json& j) {
    return Vocab(j.at("words").get<std::map<std::string, int>>(), j.at("max_len").get<std::size_t>());
  }

 private:
  std::map<std::string, int> ids_;
  std::size_t max_len_ = 8;
};

/// Lowercased words -> ids, truncated or PAD-filled to vocab.max_len().
inline std::vector<int> tokenize_text(const std::string& caption, const Vocab& vocab) {
  std::vector<int> ids;
  for (const std::string& w : Vocab::split_words(caption)) {
    if (ids.size() == vocab.max_len()) break;
    ids.push_back(vocab.id(w));
  }
  ids.resize(vocab.max_len(), Vocab::kPad);
  return ids;
}

struct S2SConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_mult = 4;
  std::size_t patch_size = 4;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 8;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t latent_size = 4;
  std::size_t codebook_size = 64;
  std::size_t code_dim = 32;
  double dropout = 0.1;
  bool use_text = true;
  bool use_low = true;
  bool use_high = true;

  std::size_t patches() const {
    const std::size_t n = image_size / patch_size;
    return n * n;
  }
  std::size_t latent_cells() const { return latent_size * latent_size; }

  void validate() const {
    if (!use_text && !use_low && !use_high) throw ParameterError("s2s config: every perspective is disabled");
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0) throw ParameterError("s2s config: model_dim/heads");
    if (patch_size == 0 || image_size % patch_size != 0) throw ParameterError("s2s config: patch size must divide image");
    if (codebook_size < 2 || code_dim == 0 || latent_size == 0) throw ParameterError("s2s config: latent layout");
    if (use_text && vocab_size <= Vocab::kFirstWord) throw ParameterError("s2s config: empty vocabulary");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("s2s config: dropout outside [0, 1)");
  }

  // Reference-scale layout (not trained here).
  static S2SConfig full_scale() {
    S2SConfig c;
    c.model_dim = 1024;
    c.heads = 16;
    c.encoder_layers = 12;
    c.decoder_layers = 24;
    c.patch_size = 16;
    c.image_size = 256;
    c.latent_size = 32;
    c.codebook_size = 8192;
    c.code_dim = 256;
    return c;
  }
};

inline nlohmann::json to_json(const S2SConfig& c) {
  return {{"model_dim", c.model_dim},       {"heads", c.heads},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"ffn_mult", c.ffn_mult},         {"patch_size", c.patch_size},
          {"vocab_size", c.vocab_size},     {"max_text_len", c.max_text_len},
          {"image_size", c.image_size},     {"channels", c.channels},
          {"latent_size", c.latent_size},   {"codebook_size", c.codebook_size},
          {"code_dim", c.code_dim},         {"dropout", c.dropout},
          {"use_text", c.use_text},         {"use_low", c.use_low},
          {"use_high", c.use_high}};
}

inline S2SConfig s2s_config_from_json(const nlohmann::json& j) {
  S2SConfig c;
  c.model_dim = j.at("model_dim");
  c.heads = j.at("heads");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.ffn_mult = j.at("ffn_mult");
  c.patch_size = j.at("patch_size");
  c.vocab_size = j.at("vocab_size");
  c.max_text_len = j.at("max_text_len");
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.latent_size = j.at("latent_size");
  c.codebook_size = j.at("codebook_size");
  c.code_dim = j.at("code_dim");
  c.dropout = j.at("dropout");
  c.use_text = j.at("use_text");
  c.use_low = j.at("use_low");
  c.use_high = j.at("use_high");
  c.validate();
  return c;
}

/// Encoded condition streams; a disabled stream has length 0.
struct Condition {
  std::optional<Var> text;
  std::optional<Var> low;
  std::optional<Var> high;
  std::vector<std::uint8_t> key_mask;  // 1 = PAD text position, excluded from cross-attention

  std::size_t length() const { return key_mask.size(); }

  std::size_t stream_length(const std::optional<Var>& s) const { return s ? s->shape()[0] : 0; }

  // c = [c^t; c^l; c^h]
  Var joined() const {
    std::vector<Var> parts;
    for (const auto* s : {&text, &low, &high})
      if (*s) parts.push_back(**s);
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
  }
};

/// One conditioning/decoding input.
struct S2SInput {
  std::vector<int> text;  // vocab ids, length max_text_len
  Tensor image;           // defective image [C, H, W], defective pixels zero-filled
  TokenGrid tokens;       // z~ and z^m from the codec
};

enum class DecodeMode { greedy, sampled };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Three Transformer encoders (text, pixel patches, latent tokens) and a
/// causal decoder that cross-attends to their concatenation.
class MaskedTokenTransformer {
 public:
  MaskedTokenTransformer(S2SConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t dm = config_.model_dim;
    if (config_.use_text) {
      params_.add_uniform("text.embed", Shape{config_.vocab_size, dm}, dm, rng);
      params_.add_uniform("text.pos", Shape{config_.max_text_len, dm}, dm, rng);
      add_encoder(rng, "text");
    }
    if (config_.use_low) {
      const std::size_t p = config_.patch_size;
      add_linear(params_, "low.proj", config_.channels * p * p, dm, rng);
      params_.add_uniform("low.pos", Shape{config_.patches(), dm}, dm, rng);
      add_encoder(rng, "low");
    }
    if (config_.use_high) {
      add_linear(params_, "high.proj", config_.code_dim, dm, rng);
      params_.add_uniform("high.mask", Shape{1, dm}, dm, rng);
      params_.add_uniform("high.pos", Shape{config_.latent_cells(), dm}, dm, rng);
      add_encoder(rng, "high");
    }
    params_.add_uniform("dec.embed", Shape{config_.codebook_size + 1, dm}, dm, rng);
    params_.add_uniform("dec.pos", Shape{config_.latent_cells(), dm}, dm, rng);
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string pre = "dec.l" + std::to_string(l);
      add_norm(params_, pre + ".ln1", dm);
      add_attention(params_, pre + ".self", dm, rng);
      add_norm(params_, pre + ".ln2", dm);
      add_attention(params_, pre + ".cross", dm, rng);
      add_norm(params_, pre + ".ln3", dm);
      add_linear(params_, pre + ".ff1", dm, dm * config_.ffn_mult, rng);
      add_linear(params_, pre + ".ff2", dm * config_.ffn_mult, dm, rng);
    }
    add_norm(params_, "dec.ln", dm);
    add_linear(params_, "dec.head", dm, config_.codebook_size, rng);
  }

  const S2SConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// `codebook` is the frozen codec codebook [K, d]. `dropout_rng` == nullptr
  /// disables dropout.
  Condition encode_condition(Tape& tape, const S2SInput& in, const Tensor& codebook, Rng* dropout_rng = nullptr) {
    check_input(in, codebook);
    const Binding p{tape, params_, tape.grad_enabled()};
    Condition c;
    if (config_.use_text) {
      Var x = add(embedding(p("text.embed"), in.text), p("text.pos"));
      for (int id : in.text) c.key_mask.push_back(id == Vocab::kPad);
      c.text = run_encoder(p, "text", x, {c.key_mask.data(), c.key_mask.size()}, dropout_rng);
    }
    if (config_.use_low) {
      Var x = add(apply_linear(p, "low.proj", tape.constant(patchify(in.image))), p("low.pos"));
      c.low = run_encoder(p, "low", x, {}, dropout_rng);
      c.key_mask.resize(c.key_mask.size() + config_.patches(), 0);
    }
    if (config_.use_high) {
      Var codes = embedding(tape.frozen(codebook), in.tokens.tokens);
      Var x = replace_rows(apply_linear(p, "high.proj", codes), in.tokens.latent_mask.values, p("high.mask"));
      x = add(x, p("high.pos"));
      c.high = run_encoder(p, "high", x, {}, dropout_rng);
      c.key_mask.resize(c.key_mask.size() + config_.latent_cells(), 0);
    }
    return c;
  }

  /// Logits [cells, K] for every position given the decoder input sequence
  /// (BOS followed by tokens 0..cells-2).
  Var decoder_logits(Tape& tape, const Condition& c, std::span<const int> tokens, Rng* dropout_rng = nullptr) {
    const std::size_t n = config_.latent_cells();
    if (tokens.size() != n) throw DimensionError("decoder: token sequence length");
    const Binding p{tape, params_, tape.grad_enabled()};
    std::vector<int> shifted(n);
    shifted[0] = static_cast<int>(config_.codebook_size);
    for (std::size_t i = 1; i < n; ++i) shifted[i] = tokens[i - 1];
    Var x = add(embedding(p("dec.embed"), shifted), p("dec.pos"));
    Var ctx = c.joined();
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string pre = "dec.l" + std::to_string(l);
      Var h = apply_layer_norm(p, pre + ".ln1", x);
      x = add(x, drop(apply_attention(p, pre + ".self", h, h, {}, config_.heads, true), dropout_rng));
      h = apply_layer_norm(p, pre + ".ln2", x);
      x = add(x, drop(apply_attention(p, pre + ".cross", h, ctx, c.key_mask, config_.heads, false), dropout_rng));
      h = apply_layer_norm(p, pre + ".ln3", x);
      x = add(x, drop(apply_linear(p, pre + ".ff2", silu(apply_linear(p, pre + ".ff1", h))), dropout_rng));
    }
    return apply_linear(p, "dec.head", apply_layer_norm(p, "dec.ln", x));
  }

  /// Teacher-forced loss: sum over masked cells of -log P(target | prefix, c).
  /// Decoder inputs use z~ at known cells and targets at masked cells.
  Var masked_loss(Tape& tape, const S2SInput& in, std::span<const int> targets, const Tensor& codebook,
                  Rng* dropout_rng = nullptr) {
    const std::vector<int> teacher = merge_tokens(in.tokens, targets).tokens;
    Condition c = encode_condition(tape, in, codebook, dropout_rng);
    Var logits = decoder_logits(tape, c, teacher, dropout_rng);
    return cross_entropy_rows(logits, teacher, in.tokens.latent_mask.values);
  }

  /// Raster-order prediction of the masked cells only. Returns a grid-sized
  /// vector whose unmasked entries are -1.
  std::vector<int> decode_masked_tokens(const S2SInput& in, const Tensor& codebook, const DecodeOptions& opts) {
    const std::size_t n = config_.latent_cells();
    std::vector<int> out(n, -1);
    check_input(in, codebook);
    if (!in.tokens.latent_mask.any()) return out;
    if (opts.mode == DecodeMode::sampled && !(opts.temperature > 0.0)) {
      throw ParameterError("decode: temperature must be positive");
    }
    Rng rng(opts.seed);
    Tape tape(false);
    Condition c = encode_condition(tape, in, codebook);
    std::vector<int> seq = in.tokens.tokens;
    for (std::size_t pos = 0; pos < n; ++pos) {
      if (!in.tokens.latent_mask.values[pos]) continue;
      Var logits = decoder_logits(tape, c, seq);
      const double* row = logits.value().data.data() + pos * config_.codebook_size;
      const int tok = opts.mode == DecodeMode::greedy ? argmax(row) : sample(row, opts.temperature, rng);
      seq[pos] = tok;
      out[pos] = tok;
    }
    return out;
  }

  /// z^ = z~ (1 - z^m) + z^y z^m
  static TokenGrid merge_tokens(const TokenGrid& base, std::span<const int> predicted) {
    if (predicted.size() != base.tokens.size() || base.latent_mask.size() != base.tokens.size()) {
      throw DimensionError("merge_tokens: grid size mismatch");
    }
    TokenGrid out = base;
    for (std::size_t i = 0; i < out.tokens.size(); ++i)
      if (base.latent_mask.values[i]) out.tokens[i] = predicted[i];
    return out;
  }

 private:
  void add_encoder(Rng& rng, const std::string& stream) {
    const std::size_t dm = config_.model_dim;
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string pre = stream + ".l" + std::to_string(l);
      add_norm(params_, pre + ".ln1", dm);
      add_attention(params_, pre + ".attn", dm, rng);
      add_norm(params_, pre + ".ln2", dm);
      add_linear(params_, pre + ".ff1", dm, dm * config_.ffn_mult, rng);
      add_linear(params_, pre + ".ff2", dm * config_.ffn_mult, dm, rng);
    }
    add_norm(params_, stream + ".ln", dm);
  }

  Var drop(Var x, Rng* rng) const { return rng == nullptr ? x : dropout(x, config_.dropout, *rng); }

  Var run_encoder(const Binding& p, const std::string& stream, Var x, std::span<const std::uint8_t> key_mask,
                  Rng* rng) {
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string pre = stream + ".l" + std::to_string(l);
      Var h = apply_layer_norm(p, pre + ".ln1", x);
      x = add(x, drop(apply_attention(p, pre + ".attn", h, h, key_mask, config_.heads, false), rng));
      h = apply_layer_norm(p, pre + ".ln2", x);
      x = add(x, drop(apply_linear(p, pre + ".ff2", silu(apply_linear(p, pre + ".ff1", h))), rng));
    }
    return apply_layer_norm(p, stream + ".ln", x);
  }

  // [C, H, W] -> [patches, C*P*P], channel-major within a patch.
  Tensor patchify(const Tensor& image) const {
    const std::size_t c = config_.channels, s = config_.image_size, p = config_.patch_size, g = s / p;
    Tensor out(Shape{g * g, c * p * p});
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              out.data[(py * g + px) * c * p * p + (ch * p + y) * p + x] =
                  image.data[(ch * s + py * p + y) * s + px * p + x];
    return out;
  }

  void check_input(const S2SInput& in, const Tensor& codebook) const {
    const std::size_t s = config_.image_size;
    if (in.image.size() != config_.channels * s * s) {
      throw DimensionError("s2s: image shape " + to_string(in.image.shape) + " does not match config");
    }
    if (in.tokens.height != config_.latent_size || in.tokens.width != config_.latent_size ||
        in.tokens.tokens.size() != config_.latent_cells() || in.tokens.latent_mask.size() != config_.latent_cells()) {
      throw DimensionError("s2s: token grid does not match latent size " + std::to_string(config_.latent_size));
    }
    if (codebook.rank() != 2 || codebook.shape[0] != config_.codebook_size || codebook.shape[1] != config_.code_dim) {
      throw DimensionError("s2s: codebook shape " + to_string(codebook.shape) + " does not match config");
    }
    for (int t : in.tokens.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.codebook_size) {
        throw DimensionError("s2s: token " + std::to_string(t) + " outside codebook");
      }
    }
    if (config_.use_text) {
      if (in.text.size() != config_.max_text_len) throw DimensionError("s2s: text length");
      for (int id : in.text) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) throw DimensionError("s2s: text id");
      }
    }
  }

  int argmax(const double* row) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < config_.codebook_size; ++j)
      if (row[j] > row[best]) best = j;
    return static_cast<int>(best);
  }

  int sample(const double* row, double temperature, Rng& rng) const {
    const std::size_t k = config_.codebook_size;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    std::vector<double> w(k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += w[j] = std::exp((row[j] - mx) / temperature);
    double u = rng.uniform() * z;
    for (std::size_t j = 0; j < k; ++j) {
      u -= w[j];
      if (u < 0.0) return static_cast<int>(j);
    }
    return static_cast<int>(k - 1);
  }

  S2SConfig config_;
  ParamStore params_;
};

/// Training pair: the conditioning input plus clean-image tokens as targets.
struct S2SExample {
  S2SInput input;
  std::vector<int> targets;
};

struct S2STrainOptions {
  std::size_t steps = 1500;
  double lr = 1e-3;
  double warmup_ratio = 0.05;
};

struct S2SStepMetrics {
  std::int64_t step = 0;
  double loss = 0.0;  // L2 averaged over the batch
  std::size_t masked_tokens = 0;
  bool updated = false;
};

class S2STrainer {
 public:
  S2STrainer(MaskedTokenTransformer& model, S2STrainOptions options, std::uint64_t seed)
      : model_(model), options_(options), dropout_rng_(seed) {
    opt_.lr = options.lr;
  }

  std::int64_t steps_done() const { return step_; }

  S2SStepMetrics step(std::span<const S2SExample> batch, const Tensor& codebook) {
    if (batch.empty()) throw ParameterError("train_s2s_step: empty batch");
    S2SStepMetrics m;
    for (const S2SExample& ex : batch) m.masked_tokens += ex.input.tokens.latent_mask.defective_count();
    ++step_;
    m.step = step_;
    if (m.masked_tokens == 0) return m;
    model_.params().zero_grad();
    {
      Tape tape;
      Rng* rng = model_.config().dropout > 0.0 ? &dropout_rng_ : nullptr;
      Var total;
      bool first = true;
      for (const S2SExample& ex : batch) {
        Var l = model_.masked_loss(tape, ex.input, ex.targets, codebook, rng);
        total = first ? l : add(total, l);
        first = false;
      }
      Var loss = scale(total, 1.0 / static_cast<double>(batch.size()));
      m.loss = loss.item();
      tape.backward(loss);
    }
    const auto warm =
        static_cast<std::int64_t>(std::ceil(options_.warmup_ratio * static_cast<double>(options_.steps)));
    opt_.lr = warmup_lr(options_.lr, step_ - 1, warm);
    auto params = model_.params().pointers();
    adam_step(params, opt_);
    m.updated = true;
    return m;
  }

 private:
  MaskedTokenTransformer& model_;
  S2STrainOptions options_;
  AdamState opt_;
  Rng dropout_rng_;
  std::int64_t step_ = 0;
};

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

/// Teacher-forced top-1 accuracy over masked cells.
inline TokenAccuracy masked_accuracy(MaskedTokenTransformer& model, std::span<const S2SExample> examples,
                                     const Tensor& codebook) {
  TokenAccuracy acc;
  const std::size_t k = model.config().codebook_size;
  for (const S2SExample& ex : examples) {
    Tape tape(false);
    const std::vector<int> teacher = MaskedTokenTransformer::merge_tokens(ex.input.tokens, ex.targets).tokens;
    Condition c = model.encode_condition(tape, ex.input, codebook);
    Var logits = model.decoder_logits(tape, c, teacher);
    for (std::size_t pos = 0; pos < teacher.size(); ++pos) {
      if (!ex.input.tokens.latent_mask.values[pos]) continue;
      const double* row = logits.value().data.data() + pos * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      acc.correct += best == ex.targets[pos];
      ++acc.total;
    }
  }
  return acc;
}

}  // namespace dfi
