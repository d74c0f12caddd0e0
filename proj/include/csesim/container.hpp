#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "csesim/core.hpp"

namespace csesim {

// Binary layout (all integers little-endian):
//   "CSEM" | u16 version | u16 dtype | u32 ndim | u32 dims[ndim] | payload (row-major) | u32 crc32(payload)

inline constexpr std::array<char, 4> kContainerMagic = {'C', 'S', 'E', 'M'};
inline constexpr std::uint16_t kContainerVersion = 1;

enum class DType : std::uint16_t { F32 = 1, F64 = 2, C64 = 3, C128 = 4 };

inline std::size_t element_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::C64: return 8;
    case DType::C128: return 16;
  }
  throw DataError("unknown dtype code", "dtype");
}

inline bool is_complex(DType t) { return t == DType::C64 || t == DType::C128; }

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::C64: return "c64";
    case DType::C128: return "c128";
  }
  return "unknown";
}

/// Decoded container contents. Values are held as doubles; complex payloads are interleaved (re, im).
struct ArrayContainer {
  DType dtype = DType::F64;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, [](std::size_t a, std::uint32_t d) { return a * d; });
  }

  static ArrayContainer real(std::vector<std::uint32_t> dims, std::vector<double> values, DType dtype = DType::F64) {
    ArrayContainer a{dtype, std::move(dims), std::move(values)};
    if (is_complex(dtype)) throw DataError("real container with complex dtype", "dtype");
    if (a.values.size() != a.element_count()) throw DataError("container payload does not match dims", "dimension");
    return a;
  }

  static ArrayContainer complex(std::vector<std::uint32_t> dims, const std::vector<Complex>& values,
                                DType dtype = DType::C128) {
    if (!is_complex(dtype)) throw DataError("complex container with real dtype", "dtype");
    ArrayContainer a{dtype, std::move(dims), {}};
    if (values.size() != a.element_count()) throw DataError("container payload does not match dims", "dimension");
    a.values.reserve(2 * values.size());
    for (const auto& v : values) {
      a.values.push_back(v.real());
      a.values.push_back(v.imag());
    }
    return a;
  }

  std::vector<Complex> complex_values() const {
    if (!is_complex(dtype)) throw DataError("container is not complex", "dtype");
    std::vector<Complex> out(values.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {values[2 * i], values[2 * i + 1]};
    return out;
  }

  void expect_dims(std::size_t ndim, const std::string& what) const {
    if (dims.size() != ndim) {
      throw DataError(what + ": expected " + std::to_string(ndim) + " dims, found " + std::to_string(dims.size()), "dimension");
    }
  }

  friend bool operator==(const ArrayContainer&, const ArrayContainer&) = default;
};

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xFF));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t get_u64(const unsigned char* p) {
  return static_cast<std::uint64_t>(get_u32(p)) | (static_cast<std::uint64_t>(get_u32(p + 4)) << 32);
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> encode_container(const ArrayContainer& a) {
  const std::size_t scalars = a.element_count() * (is_complex(a.dtype) ? 2 : 1);
  if (a.values.size() != scalars) throw DataError("container payload does not match dims", "dimension");
  std::vector<unsigned char> bytes(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_u16(bytes, kContainerVersion);
  detail::put_u16(bytes, static_cast<std::uint16_t>(a.dtype));
  detail::put_u32(bytes, static_cast<std::uint32_t>(a.dims.size()));
  for (auto d : a.dims) detail::put_u32(bytes, d);
  const std::size_t payload_start = bytes.size();
  const bool single = a.dtype == DType::F32 || a.dtype == DType::C64;
  bytes.reserve(payload_start + scalars * (single ? 4 : 8) + 4);
  for (double v : a.values) {
    if (single) detail::put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else detail::put_u64(bytes, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_u32(bytes, detail::crc32_of(bytes.data() + payload_start, bytes.size() - payload_start));
  return bytes;
}

inline ArrayContainer decode_container(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw DataError("not a CSEM container (bad magic)", "format");
  }
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kContainerVersion) throw DataError("unsupported container version " + std::to_string(version), "format");
  ArrayContainer a;
  const auto code = static_cast<std::uint16_t>(bytes[6] | (bytes[7] << 8));
  if (code < 1 || code > 4) throw DataError("unknown dtype code " + std::to_string(code), "format");
  a.dtype = static_cast<DType>(code);
  const std::uint32_t ndim = detail::get_u32(bytes.data() + 8);
  std::size_t pos = 12;
  if (bytes.size() < pos + 4ull * ndim) throw DataError("truncated container header", "format");
  for (std::uint32_t i = 0; i < ndim; ++i, pos += 4) a.dims.push_back(detail::get_u32(bytes.data() + pos));
  const std::size_t scalars = a.element_count() * (is_complex(a.dtype) ? 2 : 1);
  const std::size_t width = (a.dtype == DType::F32 || a.dtype == DType::C64) ? 4 : 8;
  const std::size_t payload = scalars * width;
  if (bytes.size() != pos + payload + 4) throw DataError("container payload length does not match dims", "dimension");
  const std::uint32_t stored = detail::get_u32(bytes.data() + pos + payload);
  if (stored != detail::crc32_of(bytes.data() + pos, payload)) throw DataError("container CRC mismatch", "crc");
  a.values.resize(scalars);
  for (std::size_t i = 0; i < scalars; ++i, pos += width) {
    a.values[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes.data() + pos)))
                             : std::bit_cast<double>(detail::get_u64(bytes.data() + pos));
  }
  return a;
}

inline void write_container(const std::filesystem::path& path, const ArrayContainer& a) {
  const auto bytes = encode_container(a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing", "io");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string(), "io");
}

inline ArrayContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("missing input: " + path.string(), "missing_input");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace csesim
