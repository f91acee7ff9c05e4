#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "relctr/errors.hpp"
#include "relctr/rng.hpp"
#include "relctr/tensor.hpp"

// Binary checkpoint: magic, version, block count, then per block the name,
// rank, dims, and a little-endian float32 payload; a trailing FNV-1a
// checksum over all payload bytes guards against truncation/corruption.
// Values are stored as float32, so a freshly trained double-precision model
// is quantized once on its first save; saving and reloading an
// already-loaded model is bit-stable.

namespace relctr::ckpt {

inline constexpr char kMagic[4] = {'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ofstream& f, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& f) {
  unsigned char buf[sizeof(T)];
  f.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_f32(std::ofstream& f, float v, std::uint64_t& checksum) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char buf[4];
  for (std::size_t i = 0; i < 4; ++i)
    buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  checksum = fnv1a64(buf, 4, checksum);
  f.write(reinterpret_cast<const char*>(buf), 4);
}

inline float read_f32(std::ifstream& f, std::uint64_t& checksum) {
  unsigned char buf[4];
  f.read(reinterpret_cast<char*>(buf), 4);
  checksum = fnv1a64(buf, 4, checksum);
  std::uint32_t bits = 0;
  for (std::size_t i = 0; i < 4; ++i)
    bits |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void save(const std::string& path,
                 const std::vector<std::pair<std::string, Tensor>>& blocks) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open for writing: " + path);
  f.write(kMagic, 4);
  detail::write_le<std::uint32_t>(f, kVersion);
  detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(blocks.size()));
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : blocks) {
    detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = tensor.shape();
    detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::write_le<std::uint64_t>(f, d);
    for (double v : tensor.values())
      detail::write_f32(f, static_cast<float>(v), checksum);
  }
  detail::write_le<std::uint64_t>(f, checksum);
  if (!f) throw IoError("checkpoint: write failure: " + path);
}

inline std::vector<std::pair<std::string, Tensor>> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open for reading: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint32_t>(f);
  if (version != kVersion)
    throw IoError("checkpoint: unsupported version in " + path);
  const auto count = detail::read_le<std::uint32_t>(f);
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  std::vector<std::pair<std::string, Tensor>> blocks;
  blocks.reserve(count);
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto name_len = detail::read_le<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto rank = detail::read_le<std::uint32_t>(f);
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(detail::read_le<std::uint64_t>(f));
      n *= shape[d];
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i)
      values[i] = static_cast<double>(detail::read_f32(f, checksum));
    if (!f) throw IoError("checkpoint: truncated payload in " + path);
    blocks.emplace_back(std::move(name),
                        Tensor::from(std::move(shape), std::move(values)));
  }
  const auto stored = detail::read_le<std::uint64_t>(f);
  if (!f || stored != checksum)
    throw IoError("checkpoint: checksum mismatch in " + path);
  return blocks;
}

// Copies loaded values into live parameter tensors, matching by name with
// strict shape agreement; every target must be filled exactly once.
inline void apply(const std::vector<std::pair<std::string, Tensor>>& targets,
                  const std::vector<std::pair<std::string, Tensor>>& loaded) {
  if (targets.size() != loaded.size())
    throw IoError("checkpoint: block count mismatch");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& [tname, ttensor] = targets[i];
    const auto& [lname, ltensor] = loaded[i];
    if (tname != lname)
      throw IoError("checkpoint: block name mismatch: expected '" + tname +
                    "', found '" + lname + "'");
    if (ttensor.shape() != ltensor.shape())
      throw IoError("checkpoint: shape mismatch for block '" + tname + "'");
    Tensor dst = ttensor;
    dst.mutable_values() = ltensor.values();
  }
}

}  // namespace relctr::ckpt
