// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfinpaint/params.hpp"

namespace dfi {

/// Container layout (all integers little-endian):
///   magic        4 bytes ("DFVQ" codec, "MPS2" token model)
///   version      u32
///   header       u32 byte length + UTF-8 JSON {"config", "seed", "step"}
///   array count  u32
///   per array    u32 name length + UTF-8 name, u32 dtype (0 = f32),
///                u32 rank, rank x u64 dims, raw f32 values
struct Checkpoint {
  std::string magic;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::map<std::string, Tensor> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string str() { return bytes(u32()); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const std::string& magic, const nlohmann::json& config,
                                        std::uint64_t seed, std::int64_t step,
                                        const std::map<std::string, Tensor>& arrays) {
  if (magic.size() != 4) throw ParameterError("checkpoint magic must be 4 bytes");
  std::string out = magic;
  detail::put_u32(out, kCheckpointVersion);
  nlohmann::json header = {{"config", config}, {"seed", seed}, {"step", step}};
  detail::put_string(out, header.dump());
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    detail::put_string(out, name);
    detail::put_u32(out, kDtypeF32);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::put_u64(out, d);
    for (double v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string bytes, const std::string& expected_magic) {
  detail::ByteReader in(std::move(bytes));
  Checkpoint ck;
  ck.magic = in.bytes(4);
  if (ck.magic != expected_magic) {
    throw IoError("checkpoint: expected magic '" + expected_magic + "', found '" + ck.magic + "'");
  }
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.str());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header JSON: ") + e.what());
  }
  ck.config = header.at("config");
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.step = header.at("step").get<std::int64_t>();
  const std::uint32_t count = in.u32();
  for (std::uint32_t a = 0; a < count; ++a) {
    const std::string name = in.str();
    if (in.u32() != kDtypeF32) throw IoError("checkpoint: unsupported dtype for '" + name + "'");
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u64();
    Tensor t(shape);
    for (double& v : t.data) v = static_cast<double>(std::bit_cast<float>(in.u32()));
    ck.arrays.emplace(name, std::move(t));
  }
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

// Writes to a sibling temp file, then renames over the destination.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::filesystem::path& path, const std::string& magic,
                            const nlohmann::json& config, std::uint64_t seed, std::int64_t step,
                            const ParamStore& params) {
  write_file_atomic(path, serialize_checkpoint(magic, config, seed, step, params.all()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& magic) {
  return parse_checkpoint(read_file(path), magic);
}

}  // namespace dfi
