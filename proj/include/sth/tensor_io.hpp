#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sth/error.hpp"
#include "sth/tensor.hpp"

// Binary tensor file:
//   "STHT" | u32 LE rank | rank x u32 LE dims | f32 LE payload (row-major)
// Values are widened to f64 on load.

namespace sth {

inline constexpr std::array<char, 4> kTensorMagic = {'S', 'T', 'H', 'T'};
inline constexpr std::uint32_t kMaxTensorRank = 8;

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Serializes with f32 payload; f64 values are rounded to nearest f32.
inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
  std::vector<unsigned char> buf;
  buf.reserve(8 + 4 * t.rank() + 4 * t.numel());
  buf.insert(buf.end(), kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape().dims()) {
    require(d <= 0xFFFFFFFFu, ErrorKind::DimOverflow, "dimension does not fit in u32");
    detail::put_u32(buf, static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(buf, bits);
  }
  return buf;
}

/// Parses an in-memory tensor file. `origin` names the source in error messages.
inline Tensor decode_tensor(const std::vector<unsigned char>& buf, const std::string& origin = "<buffer>") {
  auto truncated = [&](std::size_t offset, const char* what) {
    fail(ErrorKind::Parse, origin + ": truncated at byte offset " + std::to_string(offset) + " while reading " + what);
  };
  if (buf.size() < 4) truncated(buf.size(), "magic");
  if (std::memcmp(buf.data(), kTensorMagic.data(), 4) != 0)
    fail(ErrorKind::BadMagic, origin + ": expected magic \"STHT\"");
  if (buf.size() < 8) truncated(buf.size(), "rank");
  const std::uint32_t rank = detail::get_u32(buf.data() + 4);
  if (rank == 0 || rank > kMaxTensorRank)
    fail(ErrorKind::DimOverflow, origin + ": rank " + std::to_string(rank) + " outside [1," +
                                     std::to_string(kMaxTensorRank) + "]");
  std::size_t off = 8;
  std::vector<std::int64_t> dims;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    if (buf.size() < off + 4) truncated(buf.size(), "dims");
    const std::uint32_t d = detail::get_u32(buf.data() + off);
    off += 4;
    if (d == 0) fail(ErrorKind::DimOverflow, origin + ": zero dimension at index " + std::to_string(i));
    if (count > (std::uint64_t{1} << 40) / d)
      fail(ErrorKind::DimOverflow, origin + ": element count overflows");
    count *= d;
    dims.push_back(d);
  }
  const std::size_t need = off + 4 * static_cast<std::size_t>(count);
  if (buf.size() < need) truncated(buf.size(), "payload");
  if (buf.size() > need)
    fail(ErrorKind::Parse, origin + ": " + std::to_string(buf.size() - need) + " trailing bytes after offset " +
                               std::to_string(need));
  Tensor t{Shape(dims)};
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::get_u32(buf.data() + off + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = static_cast<double>(f);
  }
  return t;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const auto buf = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, [&] { return std::string("cannot open " + path.string() + " for writing"); });
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(static_cast<bool>(out), ErrorKind::Io, [&] { return std::string("write failed for " + path.string()); });
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::MissingFile, path.string());
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, [&] { return std::string("cannot open " + path.string()); });
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path), path.string());
}

/// Rounds every entry through f32, i.e. what a write/read round trip yields.
inline Tensor quantize_f32(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<double>(static_cast<float>(t[i]));
  return out;
}

}  // namespace sth
