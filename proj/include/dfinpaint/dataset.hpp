// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfinpaint/image_io.hpp"
#include "dfinpaint/rng.hpp"

namespace dfi {

inline const std::array<std::string, 3> kShapeNames{"circle", "square", "triangle"};
inline const std::array<std::string, 3> kSizeNames{"small", "medium", "large"};
inline const std::array<std::string, 8> kColorNames{"red",  "green",   "blue",   "yellow",
                                                    "cyan", "magenta", "orange", "purple"};
inline const std::array<std::array<double, 3>, 8> kColorRgb{{{0.90, 0.10, 0.10},
                                                             {0.10, 0.75, 0.20},
                                                             {0.15, 0.25, 0.90},
                                                             {0.95, 0.90, 0.15},
                                                             {0.10, 0.85, 0.90},
                                                             {0.90, 0.15, 0.85},
                                                             {0.95, 0.55, 0.10},
                                                             {0.50, 0.15, 0.70}}};

/// Half-extent of each size class as a fraction of the image side.
inline constexpr std::array<double, 3> kSizeFraction{0.125, 0.1875, 0.28125};

/// Placement of one shape. Centre coordinates are in pixel units, with pixel
/// (r, c) covering [c, c+1) x [r, r+1).
struct ShapeSpec {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  double radius = 4.0;
  double cx = 16.0;
  double cy = 16.0;
  double background = 0.8;
};

/// Tight bounding box of the shape's pixels: rows [y0, y1), cols [x0, x1).
struct BoundingBox {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;

  bool operator==(const BoundingBox&) const = default;
};

struct SyntheticImage {
  Tensor image;  // [3, S, S]
  ShapeSpec spec;
  BoundingBox bbox;
  std::string caption;
};

inline std::string caption_for(const ShapeSpec& s) {
  return "a " + kSizeNames[s.size] + " " + kColorNames[s.color] + " " + kShapeNames[s.shape];
}

inline bool shape_covers(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy, r = s.radius;
  switch (s.shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    default: {
      // Upward isosceles triangle: apex (cx, cy - r), base at cy + r, base width 2r.
      if (dy < -r || dy > r) return false;
      const double half = 0.5 * (dy + r);
      return std::abs(dx) <= half;
    }
  }
}

inline SyntheticImage render_shape(std::size_t image_size, const ShapeSpec& spec) {
  if (spec.shape >= kShapeNames.size() || spec.color >= kColorNames.size() || spec.size >= kSizeNames.size()) {
    throw ParameterError("render_shape: shape/color/size index out of range");
  }
  SyntheticImage out;
  out.spec = spec;
  out.caption = caption_for(spec);
  out.image = Tensor(Shape{3, image_size, image_size}, spec.background);
  const std::size_t n = image_size * image_size;
  BoundingBox box{image_size, image_size, 0, 0};
  bool any = false;
  for (std::size_t r = 0; r < image_size; ++r)
    for (std::size_t c = 0; c < image_size; ++c) {
      if (!shape_covers(spec, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) continue;
      any = true;
      for (std::size_t ch = 0; ch < 3; ++ch) out.image.data[ch * n + r * image_size + c] = kColorRgb[spec.color][ch];
      box.y0 = std::min(box.y0, r);
      box.x0 = std::min(box.x0, c);
      box.y1 = std::max(box.y1, r + 1);
      box.x1 = std::max(box.x1, c + 1);
    }
  if (!any) throw ParameterError("render_shape: shape covers no pixel");
  out.bbox = box;
  return out;
}

/// Random shape/color/size/placement; background gray contrasts with the
/// shape's luminance.
inline SyntheticImage synthesize_image(std::size_t image_size, std::uint64_t seed) {
  Rng rng(seed);
  ShapeSpec s;
  s.shape = rng.below(kShapeNames.size());
  s.color = rng.below(kColorNames.size());
  s.size = rng.below(kSizeNames.size());
  const double side = static_cast<double>(image_size);
  s.radius = kSizeFraction[s.size] * side;
  const double margin = s.radius + 1.0;
  s.cx = rng.uniform(margin, side - margin);
  s.cy = rng.uniform(margin, side - margin);
  const auto& rgb = kColorRgb[s.color];
  const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
  s.background = (luma > 0.5 ? 0.25 : 0.75) + rng.uniform(-0.05, 0.05);
  return render_shape(image_size, s);
}

// ---- masks ---------------------------------------------------------------

enum class MaskKind { bbox, irregular };

struct MaskSpec {
  MaskKind kind = MaskKind::irregular;
  double target_ratio = 0.315;
  std::size_t brush_min = 1;
  std::size_t brush_max = 2;
  std::size_t walk_min = 8;
  std::size_t walk_max = 24;
  std::uint64_t seed = 0;
};

/// Mask ratios cycled through when sampling training/evaluation masks.
inline constexpr std::array<double, 3> kMaskRatios{0.146, 0.315, 0.483};

inline Mask bbox_mask(std::size_t height, std::size_t width, const BoundingBox& box) {
  if (box.y1 > height || box.x1 > width || box.y0 >= box.y1 || box.x0 >= box.x1) {
    throw ParameterError("bbox_mask: box outside image or empty");
  }
  Mask m(height, width);
  for (std::size_t r = box.y0; r < box.y1; ++r)
    for (std::size_t c = box.x0; c < box.x1; ++c) m.at(r, c) = 1;
  return m;
}

/// Random-walk brush strokes until ceil(ratio * pixels) cells are defective.
/// A stamp that would overshoot the target by more than 8% is reduced to a
/// single pixel, so the realized ratio lands in [target, 1.08 * target].
inline Mask irregular_mask(std::size_t height, std::size_t width, const MaskSpec& spec) {
  if (!(spec.target_ratio > 0.0 && spec.target_ratio <= 0.9)) {
    throw ParameterError("sample_mask: target ratio must lie in (0, 0.9]");
  }
  if (spec.brush_min == 0 || spec.brush_min > spec.brush_max || spec.walk_min == 0 || spec.walk_min > spec.walk_max) {
    throw ParameterError("sample_mask: invalid brush/walk bounds");
  }
  const std::size_t n = height * width;
  const auto target = static_cast<std::size_t>(std::ceil(spec.target_ratio * static_cast<double>(n) - 1e-9));
  if (target == 0 || target > n) throw ParameterError("sample_mask: target ratio unreachable for this size");
  const double cap = 1.08 * static_cast<double>(target);
  Rng rng(spec.seed);
  Mask m(height, width);
  std::size_t count = 0;
  const std::size_t max_stamps = 1000 * n;
  std::size_t stamps = 0;
  while (count < target) {
    auto r = static_cast<long>(rng.below(height));
    auto c = static_cast<long>(rng.below(width));
    const auto radius = static_cast<long>(spec.brush_min + rng.below(spec.brush_max - spec.brush_min + 1));
    const std::size_t steps = spec.walk_min + rng.below(spec.walk_max - spec.walk_min + 1);
    for (std::size_t s = 0; s < steps && count < target; ++s) {
      if (++stamps > max_stamps) throw ParameterError("sample_mask: target ratio unreachable");
      std::vector<std::size_t> fresh;
      for (long dr = -radius; dr <= radius; ++dr)
        for (long dc = -radius; dc <= radius; ++dc) {
          const long rr = r + dr, cc = c + dc;
          if (dr * dr + dc * dc > radius * radius) continue;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(height) || cc >= static_cast<long>(width)) continue;
          const auto idx = static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc);
          if (!m.values[idx]) fresh.push_back(idx);
        }
      if (static_cast<double>(count + fresh.size()) > cap) {
        const auto idx = static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c);
        fresh.clear();
        if (!m.values[idx]) fresh.push_back(idx);
      }
      for (std::size_t idx : fresh) m.values[idx] = 1;
      count += fresh.size();
      switch (rng.below(4)) {
        case 0: r = std::max(0L, r - 1); break;
        case 1: r = std::min(static_cast<long>(height) - 1, r + 1); break;
        case 2: c = std::max(0L, c - 1); break;
        default: c = std::min(static_cast<long>(width) - 1, c + 1); break;
      }
    }
  }
  return m;
}

inline Mask sample_mask(const MaskSpec& spec, std::size_t height, std::size_t width, const BoundingBox& box) {
  return spec.kind == MaskKind::bbox ? bbox_mask(height, width, box) : irregular_mask(height, width, spec);
}

/// Mask kind and ratio drawn uniformly from {bbox, irregular} x kMaskRatios.
inline Mask random_mask(Rng& rng, std::size_t image_size, const BoundingBox& box) {
  MaskSpec spec;
  spec.kind = rng.below(2) == 0 ? MaskKind::bbox : MaskKind::irregular;
  spec.target_ratio = kMaskRatios[rng.below(kMaskRatios.size())];
  spec.seed = rng.next_u64();
  return sample_mask(spec, image_size, image_size, box);
}

// ---- datasets ------------------------------------------------------------

struct DatasetRecord {
  std::string image;  // path relative to the dataset root
  std::string mask;
  std::string caption;
  std::string shape, color, size;
  BoundingBox bbox;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::string split = "train";
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t image_size = 32;
  std::vector<DatasetRecord> records;
};

/// Per-record seed: split seed XOR record index.
inline std::uint64_t record_seed(std::uint64_t seed, std::size_t index) { return seed ^ static_cast<std::uint64_t>(index); }

/// In-memory dataset item (no files).
struct DatasetItem {
  SyntheticImage sample;
  Mask mask;
};

inline DatasetItem make_item(std::size_t image_size, std::uint64_t seed) {
  DatasetItem item;
  item.sample = synthesize_image(image_size, seed);
  Rng rng(seed ^ 0x9E3779B97F4A7C15ull);
  item.mask = random_mask(rng, image_size, item.sample.bbox);
  return item;
}

inline std::vector<DatasetItem> make_items(std::size_t count, std::size_t image_size, std::uint64_t seed) {
  std::vector<DatasetItem> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_item(image_size, record_seed(seed, i)));
  return out;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"image", r.image},
                    {"mask", r.mask},
                    {"caption", r.caption},
                    {"shape", r.shape},
                    {"color", r.color},
                    {"size", r.size},
                    {"bbox", {r.bbox.y0, r.bbox.x0, r.bbox.y1, r.bbox.x1}},
                    {"seed", r.seed}});
  }
  return {{"split", m.split}, {"seed", m.seed}, {"count", m.count}, {"image_size", m.image_size}, {"records", recs}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.split = j.at("split");
  m.seed = j.at("seed");
  m.count = j.at("count");
  m.image_size = j.at("image_size");
  for (const auto& r : j.at("records")) {
    DatasetRecord rec;
    rec.image = r.at("image");
    rec.mask = r.at("mask");
    rec.caption = r.at("caption");
    rec.shape = r.at("shape");
    rec.color = r.at("color");
    rec.size = r.at("size");
    const auto b = r.at("bbox").get<std::vector<std::size_t>>();
    if (b.size() != 4) throw IoError("manifest: bbox needs 4 entries");
    rec.bbox = {b[0], b[1], b[2], b[3]};
    rec.seed = r.at("seed");
    m.records.push_back(std::move(rec));
  }
  if (m.records.size() != m.count) throw IoError("manifest: record count mismatch");
  return m;
}

/// Writes images/NNNNN.ppm, masks/NNNNN.pgm and manifest.json under `root`.
inline DatasetManifest make_dataset(const std::filesystem::path& root, std::size_t count, std::size_t image_size,
                                    std::uint64_t seed, const std::string& split) {
  if (count == 0) throw ParameterError("make_dataset: count must be positive");
  std::error_code ec;
  std::filesystem::create_directories(root / "images", ec);
  std::filesystem::create_directories(root / "masks", ec);
  if (ec) throw IoError("make_dataset: cannot create " + root.string() + ": " + ec.message());
  DatasetManifest m;
  m.split = split;
  m.seed = seed;
  m.count = count;
  m.image_size = image_size;
  for (std::size_t i = 0; i < count; ++i) {
    char name[24];
    std::snprintf(name, sizeof name, "%05zu", i);
    const std::uint64_t rs = record_seed(seed, i);
    DatasetItem item = make_item(image_size, rs);
    DatasetRecord rec;
    rec.image = std::string("images/") + name + ".ppm";
    rec.mask = std::string("masks/") + name + ".pgm";
    rec.caption = item.sample.caption;
    rec.shape = kShapeNames[item.sample.spec.shape];
    rec.color = kColorNames[item.sample.spec.color];
    rec.size = kSizeNames[item.sample.spec.size];
    rec.bbox = item.sample.bbox;
    rec.seed = rs;
    write_ppm(root / rec.image, item.sample.image);
    write_mask_pgm(root / rec.mask, item.mask);
    m.records.push_back(std::move(rec));
  }
  write_file_atomic(root / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_file(root / "manifest.json")));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + (root / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace dfi
