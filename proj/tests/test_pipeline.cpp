// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "dfinpaint/dfinpaint.hpp"

using namespace dfi;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dfinpaint_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DFINPAINT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<double> gaussian_column(Rng& rng, std::size_t n, double mean, double sd) {
  std::vector<double> out(n);
  for (double& v : out) v = mean + sd * rng.normal();
  return out;
}

std::vector<std::vector<double>> as_rows(const std::vector<double>& col) {
  std::vector<std::vector<double>> rows;
  for (double v : col) rows.push_back({v});
  return rows;
}

}  // namespace

TEST_CASE("synthetic images are deterministic per seed") {
  const SyntheticImage a = synthesize_image(32, 7), b = synthesize_image(32, 7), c = synthesize_image(32, 8);
  CHECK(a.image.data == b.image.data);
  CHECK(a.caption == b.caption);
  CHECK(a.image.data != c.image.data);
}

TEST_CASE("captions follow the closed grammar") {
  const std::regex grammar("a (small|medium|large) (red|green|blue|yellow|magenta|cyan|orange|purple) "
                           "(circle|square|triangle)");
  std::set<std::string> seen;
  for (const DatasetItem& it : make_items(500, 32, 99)) {
    CHECK(std::regex_match(it.sample.caption, grammar));
    seen.insert(it.sample.caption);
  }
  CHECK(seen.size() > 30);
}

TEST_CASE("a red circle is dominated by red pixels") {
  ShapeSpec s;
  s.shape = 0;
  s.color = 0;
  s.size = 2;
  s.radius = kSizeFraction[2] * 32;
  s.cx = s.cy = 16.0;
  s.background = 0.75;
  const SyntheticImage img = render_shape(32, s);
  CHECK(img.caption == "a large red circle");
  std::size_t red = 0, other = 0;
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    const double r = img.image.data[p], g = img.image.data[1024 + p], b = img.image.data[2048 + p];
    if (r == 0.75 && g == 0.75 && b == 0.75) continue;
    (r > g + 0.3 && r > b + 0.3 ? red : other)++;
  }
  CHECK(red > 100);
  CHECK(other == 0);
}

TEST_CASE("bounding boxes cover the rendered shape exactly") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SyntheticImage img = synthesize_image(32, seed);
    const double bg = img.spec.background;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool shape = img.image.data[y * 32 + x] != bg;
        const bool inside = y >= img.bbox.y0 && y < img.bbox.y1 && x >= img.bbox.x0 && x < img.bbox.x1;
        if (shape) CHECK(inside);
      }
  }
}

TEST_CASE("irregular masks land near their target ratio") {
  for (double target : kMaskRatios) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      MaskSpec spec;
      spec.target_ratio = target;
      spec.seed = seed;
      const Mask m = irregular_mask(32, 32, spec);
      CHECK(m.ratio() >= target * 0.9);
      CHECK(m.ratio() <= target * 1.1);
    }
  }
  MaskSpec spec;
  spec.target_ratio = 0.315;
  spec.seed = 5;
  const Mask m = irregular_mask(32, 32, spec);
  CHECK(m.ratio() >= 0.284);
  CHECK(m.ratio() <= 0.347);
  CHECK(irregular_mask(32, 32, spec) == m);
  spec.target_ratio = 0.95;
  CHECK_THROWS_AS(irregular_mask(32, 32, spec), ParameterError);
  spec.target_ratio = 0.0;
  CHECK_THROWS_AS(irregular_mask(32, 32, spec), ParameterError);
}

TEST_CASE("bbox masks copy the shape rectangle") {
  MaskSpec spec;
  spec.kind = MaskKind::bbox;
  const BoundingBox box{11, 11, 21, 21};
  const Mask m = sample_mask(spec, 32, 32, box);
  CHECK(m.defective_count() == 100);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) CHECK(m.at(y, x) == (y >= 11 && y < 21 && x >= 11 && x < 21));

  ShapeSpec s;
  s.shape = 1;
  s.size = 0;
  s.radius = 5.0;
  s.cx = s.cy = 16.0;
  s.background = 0.25;
  CHECK(render_shape(32, s).bbox == box);
}

TEST_CASE("datasets on disk are reproducible") {
  const fs::path a = scratch("ds_a"), b = scratch("ds_b");
  make_dataset(a, 12, 32, 7, "train");
  make_dataset(b, 12, 32, 7, "train");
  CHECK(read_file(a / "manifest.json") == read_file(b / "manifest.json"));
  const DatasetManifest m = load_manifest(a);
  REQUIRE(m.records.size() == 12);
  for (const DatasetRecord& r : m.records) {
    CHECK(read_file(a / r.image) == read_file(b / r.image));
    CHECK(read_file(a / r.mask) == read_file(b / r.mask));
    const DatasetItem regen = make_item(32, r.seed);
    CHECK(read_file(a / r.image) == encode_ppm(regen.sample.image));
    CHECK(read_mask_pgm(a / r.mask) == regen.mask);
    CHECK(r.caption == regen.sample.caption);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("ppm and pgm files round-trip at 8 bits") {
  const fs::path dir = scratch("io");
  Rng rng(1);
  Tensor img(Shape{3, 5, 4});
  for (double& v : img.data) v = rng.below(256) / 255.0;
  write_ppm(dir / "x.ppm", img);
  const Tensor back = read_ppm(dir / "x.ppm");
  CHECK(back.shape == img.shape);
  CHECK(quantize_8bit(back) == quantize_8bit(img));
  CHECK(to_byte(0.5) == 128);
  CHECK(to_byte(-1.0) == 0);
  CHECK(to_byte(2.0) == 255);
  Mask m(5, 4);
  m.at(2, 3) = 1;
  write_mask_pgm(dir / "m.pgm", m);
  CHECK(read_mask_pgm(dir / "m.pgm") == m);
  write_file_atomic(dir / "bad.ppm", "P6\n2 2\n65535\n");
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), IoError);
  CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("frechet distance of identical sets is zero") {
  Rng rng(2);
  std::vector<std::vector<double>> a;
  for (int i = 0; i < 200; ++i) a.push_back({rng.normal(), rng.normal(), rng.normal()});
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-6);
}

TEST_CASE("frechet distance of shifted clouds is the squared shift") {
  Rng rng(3);
  std::vector<std::vector<double>> a, b;
  const std::vector<double> delta{0.5, -1.0};
  for (int i = 0; i < 300; ++i) {
    std::vector<double> x{rng.normal(), rng.normal() * 2.0};
    a.push_back(x);
    b.push_back({x[0] + delta[0], x[1] + delta[1]});
  }
  CHECK(frechet_distance(a, b) == Approx(1.25).margin(1e-6));
}

TEST_CASE("frechet distance matches the 1-D closed form and is symmetric") {
  Rng rng(4);
  const auto a = gaussian_column(rng, 10000, 0.0, 1.0), b = gaussian_column(rng, 10000, 0.0, 2.0);
  auto stats = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
  };
  const auto [ma, sa] = stats(a);
  const auto [mb, sb] = stats(b);
  const double closed = (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
  const double fd = frechet_distance(as_rows(a), as_rows(b));
  CHECK(fd == Approx(closed).epsilon(1e-9));
  CHECK(std::abs(fd - 1.0) <= 0.05);
  CHECK(std::abs(fd - frechet_distance(as_rows(b), as_rows(a))) <= 1e-8);
}

TEST_CASE("frechet distance is symmetric on random clouds") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 40; ++i) {
      a.push_back({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
      b.push_back({rng.normal() * 3, rng.normal() + 1, rng.normal(), rng.uniform()});
    }
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    CHECK(ab >= 0.0);
    CHECK(std::abs(ab - ba) <= 1e-8);
  }
}

TEST_CASE("frechet needs two samples") {
  std::vector<std::vector<double>> one{{1.0, 2.0}};
  CHECK_THROWS_AS(fit_gaussian(one), ParameterError);
}

TEST_CASE("run config rejects unknown keys and round-trips") {
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"codec_stepz", 3}}), ParameterError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"codec_steps", "three"}}), ParameterError);
  RunConfig c;
  c.codec_steps = 17;
  c.widths = {8, 16, 32};
  CHECK(to_json(run_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("ablations toggle the matching switches") {
  RunConfig c;
  for (const char* n : {"sym_conn", "rel_est", "text", "low"}) apply_ablation(c, n);
  CHECK_FALSE(c.use_symmetrical_connection);
  CHECK_FALSE(c.use_relative_estimation);
  CHECK_FALSE(c.use_text);
  CHECK_FALSE(c.use_low);
  CHECK(c.use_high);
  CHECK_THROWS_AS(apply_ablation(c, "everything"), ParameterError);
  apply_ablation(c, "high");
  CHECK_THROWS_AS(make_s2s_config(c, make_codec_config(c), 10), ParameterError);
}

TEST_CASE("inpainting preserves non-defective pixels") {
  const RunConfig rc;
  DefectFreeCodec codec(make_codec_config(rc), 3);
  const auto items = make_items(6, 32, 11);
  std::vector<std::string> captions;
  for (const auto& it : items) captions.push_back(it.sample.caption);
  const Vocab vocab = Vocab::from_texts(captions, rc.max_text_len);
  MaskedTokenTransformer model(make_s2s_config(rc, codec.config(), vocab.size()), 4);
  Rng rng(6);
  for (const DatasetItem& it : items) {
    const Mask m = sample_codec_mask(rng, codec, it.sample.bbox);
    const InpaintResult r = inpaint(codec, model, vocab, it.sample.image, m, it.sample.caption, {});
    const auto in8 = quantize_8bit(it.sample.image), out8 = quantize_8bit(r.image);
    for (std::size_t i = 0; i < in8.size(); ++i)
      if (!m.values[i % m.size()]) CHECK(in8[i] == out8[i]);
    for (std::size_t p = 0; p < 16; ++p)
      if (!r.observed.latent_mask.values[p]) CHECK(r.completed.tokens[p] == r.observed.tokens[p]);
  }
  const InpaintResult clean = inpaint(codec, model, vocab, items[0].sample.image, Mask(32, 32), "", {});
  CHECK(clean.image.data == items[0].sample.image.data);
  CHECK_THROWS_AS(inpaint(codec, model, vocab, items[0].sample.image, Mask(32, 32, 1), "", {}),
                  DegenerateInputError);
}

TEST_CASE("incompatible checkpoints are refused") {
  RunConfig rc;
  DefectFreeCodec codec(make_codec_config(rc), 1);
  rc.codebook_size = 32;
  DefectFreeCodec other(make_codec_config(rc), 1);
  CHECK_THROWS_AS(check_compatible(codec.config(), make_s2s_config(rc, other.config(), 10)), ParameterError);
}

TEST_CASE("evaluation reports zero deviation for identical sets") {
  std::vector<Tensor> imgs;
  std::vector<Mask> masks;
  std::vector<std::string> names;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const DatasetItem it = make_item(32, s);
    imgs.push_back(it.sample.image);
    masks.push_back(it.mask);
    names.push_back(std::to_string(s));
  }
  const EvalReport r = evaluate(imgs, imgs, masks, names, 1);
  CHECK(std::abs(r.frechet) <= 1e-6);
  CHECK(r.nondefective_max_abs_dev == 0);
  CHECK(r.masked_mse == 0.0);
  CHECK_FALSE(r.masked_psnr.has_value());
  CHECK(*psnr_from_mse(0.01) == Approx(20.0));
}

TEST_CASE("cli exit codes") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("make-dataset") == 1);
  CHECK(run_cli("make-dataset --out /tmp/x --bogus") == 1);
  CHECK(run_cli("eval --generated /nonexistent --reference /nonexistent") == 2);
  CHECK(run_cli("--ablate nonsense make-dataset --out /tmp/dfinpaint_never") == 2);
}
