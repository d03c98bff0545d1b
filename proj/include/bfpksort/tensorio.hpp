// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Single-tensor binary container ("BFPT"). All integers little-endian.
//
//   offset  size      field
//   0       4         magic "BFPT"
//   4       4         format version (1)
//   8       4         dtype: 0 = float64, 1 = float32, 2 = packed BFP
//   12      4         ndim
//   16      4*ndim    dims
//   ...     16        dtype 2 only: mantissa_bits, exponent_bits, block_size, blocking_axis
//   ...     4         CRC-32 of every preceding header byte
//   ...               payload: raw values, or the packed block stream
//
// See docs/tensorfile.md for the full description.

#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bfpksort/bfp.hpp"
#include "bfpksort/error.hpp"
#include "bfpksort/tensor.hpp"

namespace bfpksort {

inline constexpr std::array<char, 4> kTensorMagic = {'B', 'F', 'P', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

enum class DType : std::uint32_t { kFloat64 = 0, kFloat32 = 1, kPackedBfp = 2 };

using AnyTensor = std::variant<Tensor<double>, Tensor<float>, BfpTensor>;

struct TensorFileHeader {
  std::uint32_t version = kTensorFormatVersion;
  DType dtype = DType::kFloat64;
  Shape dims;
  // dtype 2 only
  BfpFormat format;
  std::size_t blocking_axis = 0;
  std::uint32_t header_crc = 0;
  std::size_t header_size = 0;
  std::size_t payload_size = 0;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw Error(ErrorKind::kShapeMismatch, std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  void need(std::size_t n, const char* field) const {
    if (in_.size() - pos_ < n) {
      throw Error(ErrorKind::kCorruptFile, std::string("file truncated while reading ") + field);
    }
  }

  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode_header(DType dtype, const Shape& dims, const BfpFormat* fmt,
                                               std::size_t axis) {
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  put_u32(out, kTensorFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(dtype));
  put_u32(out, checked_u32(dims.size(), "ndim"));
  for (std::size_t d : dims) put_u32(out, checked_u32(d, "dimension"));
  if (fmt) {
    put_u32(out, static_cast<std::uint32_t>(fmt->mantissa_bits));
    put_u32(out, static_cast<std::uint32_t>(fmt->exponent_bits));
    put_u32(out, checked_u32(fmt->block_size, "block_size"));
    put_u32(out, checked_u32(axis, "blocking_axis"));
  }
  put_u32(out, crc32_of(out));
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Tensor<double>& t) {
  auto out = detail::encode_header(DType::kFloat64, t.shape, nullptr, 0);
  for (double v : t.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline std::vector<std::uint8_t> encode(const Tensor<float>& t) {
  auto out = detail::encode_header(DType::kFloat32, t.shape, nullptr, 0);
  for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline std::vector<std::uint8_t> encode(const BfpTensor& t) {
  const PackedBuffer packed = pack(t);
  auto out = detail::encode_header(DType::kPackedBfp, t.logical_shape, &t.format, t.blocking_axis);
  out.insert(out.end(), packed.bytes.begin(), packed.bytes.end());
  return out;
}

/// Parses and checks the header, including that the payload size matches.
inline TensorFileHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kTensorMagic.size() ||
      std::memcmp(bytes.data(), kTensorMagic.data(), kTensorMagic.size()) != 0) {
    throw Error(ErrorKind::kNotATensorFile, "missing BFPT magic");
  }
  detail::ByteReader in(bytes.subspan(kTensorMagic.size()));
  TensorFileHeader h;
  h.version = in.u32("version");
  if (h.version > kTensorFormatVersion) {
    throw Error(ErrorKind::kUnsupportedVersion, "file version " + std::to_string(h.version) +
                                                    ", newest supported is " + std::to_string(kTensorFormatVersion));
  }
  if (h.version == 0) throw Error(ErrorKind::kCorruptFile, "version 0 is not valid");
  const std::uint32_t dtype = in.u32("dtype");
  if (dtype > static_cast<std::uint32_t>(DType::kPackedBfp)) {
    throw Error(ErrorKind::kCorruptFile, "unknown dtype code " + std::to_string(dtype));
  }
  h.dtype = static_cast<DType>(dtype);
  const std::uint32_t ndim = in.u32("ndim");
  in.need(std::size_t{ndim} * 4, "dims");
  for (std::uint32_t i = 0; i < ndim; ++i) h.dims.push_back(in.u32("dims"));
  if (h.dtype == DType::kPackedBfp) {
    h.format.mantissa_bits = static_cast<int>(std::min<std::uint32_t>(in.u32("mantissa_bits"), 1024));
    h.format.exponent_bits = static_cast<int>(std::min<std::uint32_t>(in.u32("exponent_bits"), 1024));
    h.format.block_size = in.u32("block_size");
    h.blocking_axis = in.u32("blocking_axis");
  }
  const std::size_t crc_offset = kTensorMagic.size() + in.pos();
  h.header_crc = in.u32("header crc");
  h.header_size = kTensorMagic.size() + in.pos();
  if (detail::crc32_of(bytes.first(crc_offset)) != h.header_crc) {
    throw Error(ErrorKind::kCorruptFile, "header checksum mismatch");
  }

  // Saturating element count. Every element takes at least 2 bits, so a count
  // above 8 per available byte cannot match the payload.
  const std::size_t available = bytes.size() - h.header_size;
  const std::size_t cap = 8 * available + 8;
  std::size_t count = std::ranges::find(h.dims, 0) != h.dims.end() ? 0 : 1;
  for (std::size_t d : h.dims) {
    if (count != 0 && count > cap / d) count = cap + 1;
    else count *= d;
  }
  if (h.dtype == DType::kPackedBfp) {
    try {
      h.format.validate();
    } catch (const Error& err) {
      throw Error(ErrorKind::kCorruptFile, err.what());
    }
    if (h.blocking_axis >= h.dims.size()) throw Error(ErrorKind::kCorruptFile, "blocking axis out of range");
    h.payload_size = count > cap ? available + 1 : packed_size(h.dims, h.blocking_axis, h.format);
  } else {
    const std::size_t width = h.dtype == DType::kFloat64 ? 8 : 4;
    h.payload_size = count > cap ? available + 1 : count * width;
  }
  if (available < h.payload_size) throw Error(ErrorKind::kCorruptFile, "payload truncated");
  if (available > h.payload_size) throw Error(ErrorKind::kCorruptFile, "trailing bytes after payload");
  return h;
}

inline AnyTensor decode(std::span<const std::uint8_t> bytes) {
  const TensorFileHeader h = parse_header(bytes);
  const auto payload = bytes.subspan(h.header_size);
  auto load_u64 = [&](std::size_t i) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(payload[i * 8 + b]) << (8 * b);
    return v;
  };
  auto load_u32 = [&](std::size_t i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(payload[i * 4 + b]) << (8 * b);
    return v;
  };
  switch (h.dtype) {
    case DType::kFloat64: {
      Tensor<double> t(h.dims);
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = std::bit_cast<double>(load_u64(i));
      return t;
    }
    case DType::kFloat32: {
      Tensor<float> t(h.dims);
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = std::bit_cast<float>(load_u32(i));
      return t;
    }
    case DType::kPackedBfp:
      try {
        return unpack(payload, h.format, h.dims, h.blocking_axis);
      } catch (const Error& err) {
        throw Error(ErrorKind::kCorruptFile, err.what());
      }
  }
  throw Error(ErrorKind::kCorruptFile, "unreachable dtype");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::kIo, "read failed: " + path.string());
  return bytes;
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorKind::kIo, "cannot rename onto " + path.string());
  }
}

template <class T>
void save(const std::filesystem::path& path, const T& tensor) {
  const auto bytes = encode(tensor);
  write_file_atomic(path, bytes);
}

inline AnyTensor load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode(bytes);
  } catch (const Error& err) {
    throw Error(err.kind(), path.string() + ": " + err.what());
  }
}

/// Loads a float64 or float32 matrix file as a Matrix of doubles.
inline Matrix load_matrix(const std::filesystem::path& path) {
  const AnyTensor any = load(path);
  if (const auto* t64 = std::get_if<Tensor<double>>(&any)) return Matrix::from_tensor(*t64);
  if (const auto* t32 = std::get_if<Tensor<float>>(&any)) {
    return Matrix::from_tensor(Tensor<double>(t32->shape, std::vector<double>(t32->data.begin(), t32->data.end())));
  }
  throw Error(ErrorKind::kShapeMismatch, path.string() + ": expected a float matrix, found a packed BFP tensor");
}

}  // namespace bfpksort
