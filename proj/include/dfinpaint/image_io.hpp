// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfinpaint/checkpoint.hpp"
#include "dfinpaint/masked_ops.hpp"

namespace dfi {

// [0, 1] -> [0, 255] with round-half-up and clamping.
inline std::uint8_t to_byte(double v) {
  const double s = std::floor(v * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

inline std::vector<std::uint8_t> quantize_8bit(const Tensor& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_byte(image.data[i]);
  return out;
}

namespace detail {

// Header tokens of a binary PNM file; '#' comments are skipped.
struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const std::string& what) {
  PnmHeader h;
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t.push_back(bytes[pos++]);
    if (t.empty()) throw IoError(what + ": truncated header");
    return t;
  };
  auto number = [&]() {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos) throw IoError(what + ": bad header field '" + t + "'");
    return static_cast<std::size_t>(std::stoul(t));
  };
  h.magic = token();
  h.width = number();
  h.height = number();
  h.maxval = number();
  if (pos >= bytes.size()) throw IoError(what + ": missing pixel data");
  h.data_offset = pos + 1;  // single whitespace byte after maxval
  if (h.width == 0 || h.height == 0) throw IoError(what + ": zero image dimension");
  if (h.maxval != 255) throw IoError(what + ": only maxval 255 is supported");
  return h;
}

}  // namespace detail

/// Binary PPM (P6) -> [3, H, W] with values v / 255.
inline Tensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path.string());
  if (h.magic != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.data_offset != 3 * n) throw IoError(path.string() + ": pixel data size mismatch");
  Tensor img(Shape{3, h.height, h.width});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img.data[c * n + p] = static_cast<unsigned char>(bytes[h.data_offset + 3 * p + c]) / 255.0;
  return img;
}

inline std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3) throw DimensionError("write_ppm: expected [3, H, W], got " + to_string(image.shape));
  const std::size_t hgt = image.shape[1], wid = image.shape[2], n = hgt * wid;
  std::string out = "P6\n" + std::to_string(wid) + " " + std::to_string(hgt) + "\n255\n";
  const auto q = quantize_8bit(image);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(q[c * n + p]));
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  write_file_atomic(path, encode_ppm(image));
}

/// Binary PGM (P5); any nonzero byte is defective.
inline Mask read_mask_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path.string());
  if (h.magic != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  if (bytes.size() - h.data_offset != h.width * h.height) throw IoError(path.string() + ": pixel data size mismatch");
  Mask m(h.height, h.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = bytes[h.data_offset + i] != 0;
  return m;
}

inline void write_mask_pgm(const std::filesystem::path& path, const Mask& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  for (std::uint8_t v : m.values) out.push_back(static_cast<char>(v ? 255 : 0));
  write_file_atomic(path, out);
}

/// Copy of `image` with every defective pixel set to 0 in all channels.
inline Tensor zero_fill(const Tensor& image, const Mask& m) {
  const std::size_t hw = m.size();
  if (image.size() % hw != 0 || image.shape[image.rank() - 1] != m.width) {
    throw DimensionError("zero_fill: mask does not match image");
  }
  Tensor out(image.shape, image.data);
  for (std::size_t c = 0; c < image.size() / hw; ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (m.values[p]) out.data[c * hw + p] = 0.0;
  return out;
}

}  // namespace dfi
