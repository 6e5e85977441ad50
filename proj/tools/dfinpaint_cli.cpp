// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: dataset synthesis, training, inpainting,
// evaluation and gradient checks.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dfinpaint/dfinpaint.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::uint64_t seed = 1;
  std::vector<std::string> ablate;
};

dfi::RunConfig resolve_config(const GlobalOptions& g) {
  dfi::RunConfig c = g.config_path.empty() ? dfi::RunConfig{} : dfi::load_run_config(g.config_path);
  for (const std::string& name : g.ablate) dfi::apply_ablation(c, name);
  return c;
}

// FNV-1a, mixes the split name into the dataset seed.
std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : split) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return seed ^ h;
}

std::vector<dfi::TrainingImage> load_training_images(const fs::path& root) {
  const dfi::DatasetManifest m = dfi::load_manifest(root);
  std::vector<dfi::TrainingImage> out;
  for (const auto& rec : m.records) out.push_back({dfi::read_ppm(root / rec.image), rec.bbox, rec.caption});
  return out;
}

void print_json_line(const nlohmann::json& j) { std::cout << j.dump() << "\n"; }

int run_make_dataset(const GlobalOptions& g, const std::string& out, std::size_t count, const std::string& split) {
  const dfi::RunConfig c = resolve_config(g);
  const std::size_t n = count == 0 ? c.dataset_size : count;
  const auto m = dfi::make_dataset(out, n, c.image_size, split_seed(g.seed, split), split);
  print_json_line({{"command", "make-dataset"}, {"records", m.records.size()}, {"split", split}, {"out", out}});
  return 0;
}

int run_train_codec(const GlobalOptions& g, const std::string& data, const std::string& out) {
  const dfi::RunConfig c = resolve_config(g);
  const auto images = load_training_images(data);
  dfi::DefectFreeCodec codec(dfi::make_codec_config(c), g.seed);
  std::int64_t last = 0;
  dfi::train_codec(codec, images, c, g.seed, [&](const dfi::CodecStepMetrics& m) {
    last = m.step;
    if (c.log_every != 0 && (m.step % static_cast<std::int64_t>(c.log_every) == 0 || m.step == 1)) {
      print_json_line({{"step", m.step},
                       {"vq", m.vq},
                       {"perceptual", m.perceptual},
                       {"adversarial", m.adversarial},
                       {"total", m.total},
                       {"reconstruction_mse", m.reconstruction_mse},
                       {"codes_used", m.codes_used}});
    }
  });
  dfi::save_codec(out, codec, g.seed, last);
  print_json_line({{"command", "train-codec"}, {"steps", last}, {"out", out}});
  return 0;
}

int run_train_s2s(const GlobalOptions& g, const std::string& data, const std::string& codec_path,
                  const std::string& out) {
  const dfi::RunConfig c = resolve_config(g);
  const auto images = load_training_images(data);
  dfi::DefectFreeCodec codec = dfi::load_codec(codec_path);
  std::vector<std::string> captions;
  for (const auto& im : images) captions.push_back(im.caption);
  const dfi::Vocab vocab = dfi::Vocab::from_texts(captions, c.max_text_len);
  const auto examples = dfi::make_s2s_examples(codec, vocab, images, c.masks_per_image, g.seed);
  dfi::MaskedTokenTransformer model(dfi::make_s2s_config(c, codec.config(), vocab.size()), g.seed);
  const dfi::Tensor& codebook = codec.params().get("codebook");
  std::int64_t last = 0;
  dfi::train_s2s(model, examples, codebook, c, g.seed, [&](const dfi::S2SStepMetrics& m) {
    last = m.step;
    if (c.log_every != 0 && (m.step % static_cast<std::int64_t>(c.log_every) == 0 || m.step == 1)) {
      print_json_line({{"step", m.step}, {"loss", m.loss}, {"masked_tokens", m.masked_tokens}});
    }
  });
  dfi::save_token_model(out, model, vocab, g.seed, last);
  print_json_line({{"command", "train-s2s"}, {"steps", last}, {"examples", examples.size()}, {"out", out}});
  return 0;
}

struct InpaintArgs {
  std::string image, mask, caption, codec, s2s, out, mode = "greedy";
  double temperature = 1.0;
  std::size_t samples = 1;
};

fs::path sample_path(const fs::path& out, std::size_t index, std::size_t total) {
  if (total == 1) return out;
  fs::path p = out;
  p.replace_filename(out.stem().string() + "_" + std::to_string(index) + out.extension().string());
  return p;
}

int run_inpaint(const GlobalOptions& g, const InpaintArgs& a) {
  dfi::DefectFreeCodec codec = dfi::load_codec(a.codec);
  dfi::TokenModelBundle tm = dfi::load_token_model(a.s2s);
  // Ablations on the codec apply to this run only.
  const dfi::RunConfig c = resolve_config(g);
  codec.mutable_config().use_symmetrical_connection &= c.use_symmetrical_connection;
  codec.mutable_config().use_relative_estimation &= c.use_relative_estimation;
  const dfi::Tensor image = dfi::read_ppm(a.image);
  const dfi::Mask mask = dfi::read_mask_pgm(a.mask);
  if (a.samples == 0) throw dfi::ParameterError("--samples must be positive");
  for (std::size_t i = 0; i < a.samples; ++i) {
    dfi::DecodeOptions opts;
    opts.mode = a.mode == "sampled" ? dfi::DecodeMode::sampled : dfi::DecodeMode::greedy;
    opts.temperature = a.temperature;
    opts.seed = g.seed + i;
    const auto r = dfi::inpaint(codec, tm.model, tm.vocab, image, mask, a.caption, opts);
    const fs::path dest = sample_path(a.out, i, a.samples);
    dfi::write_ppm(dest, r.image);
    print_json_line({{"command", "inpaint"}, {"out", dest.string()}, {"tokens", r.completed.tokens}});
  }
  return 0;
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw dfi::IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

int run_eval(const GlobalOptions& g, const std::string& generated, const std::string& reference,
             const std::string& masks_dir, const std::string& out) {
  const dfi::RunConfig c = resolve_config(g);
  std::vector<dfi::Tensor> gen, ref;
  std::vector<dfi::Mask> masks;
  std::vector<std::string> names;
  for (const fs::path& p : list_files(generated, ".ppm")) {
    const fs::path r = fs::path(reference) / p.filename();
    if (!fs::exists(r)) throw dfi::IoError("no reference image for " + p.filename().string());
    gen.push_back(dfi::read_ppm(p));
    ref.push_back(dfi::read_ppm(r));
    names.push_back(p.filename().string());
    if (!masks_dir.empty()) masks.push_back(dfi::read_mask_pgm(fs::path(masks_dir) / (p.stem().string() + ".pgm")));
  }
  const std::string text = dfi::to_json(dfi::evaluate(gen, ref, masks, names, c.feature_seed)).dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    dfi::write_file_atomic(out, text);
  }
  return 0;
}

int run_check_grads(const GlobalOptions& g) {
  constexpr double kTolerance = 1e-4;
  bool ok = true;
  std::printf("%-32s %-12s %s\n", "op", "max_rel_err", "status");
  for (const auto& row : dfi::run_gradient_suite(g.seed)) {
    const bool pass = row.max_rel_error <= kTolerance;
    ok = ok && pass;
    std::printf("%-32s %.4e   %s\n", row.op.c_str(), row.max_rel_error, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Defect-free inpainting toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "Flat JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--ablate", g.ablate, "Comma-separated ablations: sym_conn, rel_est, text, low, high")
      ->delimiter(',');
  app.fallthrough();

  std::string out, data, codec_path, split = "train", generated, reference, masks_dir;
  std::size_t count = 0;
  InpaintArgs ia;

  auto* mk = app.add_subcommand("make-dataset", "Synthesize a captioned shapes dataset");
  mk->add_option("--out", out, "Output directory")->required();
  mk->add_option("--count", count, "Number of records (default: dataset_size)");
  mk->add_option("--split", split, "Split name");

  auto* tc = app.add_subcommand("train-codec", "Train the defect-free codec");
  tc->add_option("--data", data, "Dataset directory")->required();
  tc->add_option("--out", out, "Checkpoint path")->required();

  auto* ts = app.add_subcommand("train-s2s", "Train the masked-token model on a frozen codec");
  ts->add_option("--data", data, "Dataset directory")->required();
  ts->add_option("--codec", codec_path, "Codec checkpoint")->required();
  ts->add_option("--out", out, "Checkpoint path")->required();

  auto* ip = app.add_subcommand("inpaint", "Fill the masked region of one image");
  ip->add_option("--image", ia.image, "Input PPM")->required();
  ip->add_option("--mask", ia.mask, "Mask PGM (nonzero = defective)")->required();
  ip->add_option("--caption", ia.caption, "Guidance text")->required();
  ip->add_option("--codec", ia.codec, "Codec checkpoint")->required();
  ip->add_option("--s2s", ia.s2s, "Token model checkpoint")->required();
  ip->add_option("--out", ia.out, "Output PPM")->required();
  ip->add_option("--mode", ia.mode, "greedy or sampled")->check(CLI::IsMember({"greedy", "sampled"}));
  ip->add_option("--temperature", ia.temperature, "Sampling temperature");
  ip->add_option("--samples", ia.samples, "Number of outputs");

  auto* ev = app.add_subcommand("eval", "Frechet distance and region metrics");
  ev->add_option("--generated", generated, "Directory of generated PPMs")->required();
  ev->add_option("--reference", reference, "Directory of reference PPMs")->required();
  ev->add_option("--masks", masks_dir, "Directory of PGM masks matching image names");
  ev->add_option("--out", out, "Write the report here instead of stdout");

  auto* cg = app.add_subcommand("check-grads", "Finite-difference check of every differentiable op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*mk) return run_make_dataset(g, out, count, split);
    if (*tc) return run_train_codec(g, data, out);
    if (*ts) return run_train_s2s(g, data, codec_path, out);
    if (*ip) return run_inpaint(g, ia);
    if (*ev) return run_eval(g, generated, reference, masks_dir, out);
    if (*cg) return run_check_grads(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
