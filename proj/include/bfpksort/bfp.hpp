// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Block Floating Point codec.
//
// A block holds n signed integer mantissas M_i in the symmetric range
// [-(2^(p-1)-1), 2^(p-1)-1] and one b-bit signed exponent e; element i decodes
// to 2^e * M_i. Casting picks the smallest e for which the rounded
// largest-magnitude element still fits, then rounds every element
// half-to-even at that scale.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bfpksort/error.hpp"
#include "bfpksort/tensor.hpp"

namespace bfpksort {

struct BfpFormat {
  int mantissa_bits = 4;
  int exponent_bits = 8;
  std::size_t block_size = 32;

  static constexpr int kMinMantissaBits = 2;
  static constexpr int kMaxMantissaBits = 16;
  static constexpr int kMinExponentBits = 2;
  static constexpr int kMaxExponentBits = 16;
  // Keeps the int64 block accumulator of bfp_dot exact: n * (2^15)^2 < 2^63.
  static constexpr std::size_t kMaxBlockSize = std::size_t{1} << 20;

  /// 4-bit mantissas, 8-bit shared exponent.
  static BfpFormat bfp12(std::size_t n) { return {4, 8, n}; }
  /// 8-bit mantissas, 8-bit shared exponent.
  static BfpFormat bfp16(std::size_t n) { return {8, 8, n}; }

  std::int32_t max_mantissa() const { return (std::int32_t{1} << (mantissa_bits - 1)) - 1; }
  int min_exponent() const { return -(1 << (exponent_bits - 1)); }
  int max_exponent() const { return (1 << (exponent_bits - 1)) - 1; }

  /// Bits occupied by one block before byte alignment.
  std::size_t block_bits() const {
    return block_size * static_cast<std::size_t>(mantissa_bits) + static_cast<std::size_t>(exponent_bits);
  }
  std::size_t bytes_per_block() const { return (block_bits() + 7) / 8; }

  void validate() const {
    if (mantissa_bits < kMinMantissaBits || mantissa_bits > kMaxMantissaBits) {
      throw Error(ErrorKind::kInvalidFormat, "mantissa_bits must be in [2, 16], got " + std::to_string(mantissa_bits));
    }
    if (exponent_bits < kMinExponentBits || exponent_bits > kMaxExponentBits) {
      throw Error(ErrorKind::kInvalidFormat, "exponent_bits must be in [2, 16], got " + std::to_string(exponent_bits));
    }
    if (block_size < 1 || block_size > kMaxBlockSize) {
      throw Error(ErrorKind::kInvalidFormat, "block_size must be in [1, 2^20], got " + std::to_string(block_size));
    }
  }

  /// "BFP12_32" style name; the number is mantissa plus exponent bits.
  std::string name() const {
    std::string s = "BFP" + std::to_string(mantissa_bits + exponent_bits) + "_" + std::to_string(block_size);
    if (exponent_bits != 8) s += "_e" + std::to_string(exponent_bits);
    return s;
  }

  /// Parses names produced by name(). Returns nullopt for anything else.
  static std::optional<BfpFormat> parse(std::string_view text) {
    if (!text.starts_with("BFP")) return std::nullopt;
    text.remove_prefix(3);
    auto read_uint = [&text](std::size_t& out) {
      const char* first = text.data();
      const char* last = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(first, last, out);
      if (ec != std::errc() || ptr == first) return false;
      text.remove_prefix(static_cast<std::size_t>(ptr - first));
      return true;
    };
    std::size_t total = 0;
    std::size_t n = 0;
    std::size_t b = 8;
    if (!read_uint(total) || !text.starts_with("_")) return std::nullopt;
    text.remove_prefix(1);
    if (!read_uint(n)) return std::nullopt;
    if (text.starts_with("_e")) {
      text.remove_prefix(2);
      if (!read_uint(b)) return std::nullopt;
    }
    if (!text.empty() || total <= b || total - b > 64 || b > 64) return std::nullopt;
    BfpFormat fmt{static_cast<int>(total - b), static_cast<int>(b), n};
    try {
      fmt.validate();
    } catch (const Error&) {
      return std::nullopt;
    }
    return fmt;
  }

  bool operator==(const BfpFormat&) const = default;
};

struct BfpBlock {
  int exponent = 0;
  std::vector<std::int32_t> mantissas;

  bool operator==(const BfpBlock&) const = default;
};

/// Exact rational storage cost p + b/n, kept reduced.
struct BitsPerElement {
  std::int64_t numerator = 0;
  std::int64_t denominator = 1;

  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
  bool operator==(const BitsPerElement&) const = default;
};

inline BitsPerElement bits_per_element(const BfpFormat& fmt) {
  fmt.validate();
  const auto n = static_cast<std::int64_t>(fmt.block_size);
  std::int64_t num = static_cast<std::int64_t>(fmt.mantissa_bits) * n + fmt.exponent_bits;
  const std::int64_t g = std::gcd(num, n);
  return {num / g, n / g};
}

/// Casts up to n values into one block. Short input is zero-padded to n.
inline BfpBlock quantize_block(std::span<const double> values, const BfpFormat& fmt) {
  fmt.validate();
  if (values.size() > fmt.block_size) {
    throw Error(ErrorKind::kShapeMismatch, "block input has " + std::to_string(values.size()) +
                                               " values, block size is " + std::to_string(fmt.block_size));
  }
  double max_abs = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw Error(ErrorKind::kInvalidValue, "non-finite value at block offset " + std::to_string(i));
    }
    max_abs = std::max(max_abs, std::fabs(values[i]));
  }

  BfpBlock block{fmt.min_exponent(), std::vector<std::int32_t>(fmt.block_size, 0)};
  if (max_abs == 0.0) return block;

  const std::int32_t limit = fmt.max_mantissa();
  // max_abs is in [2^L, 2^(L+1)); the minimal exponent is L-p+2 or L-p+3.
  int e = std::ilogb(max_abs) - fmt.mantissa_bits + 2;
  if (std::nearbyint(std::ldexp(max_abs, -e)) > limit) ++e;
  if (e < fmt.min_exponent()) e = fmt.min_exponent();
  if (e > fmt.max_exponent()) {
    throw Error(ErrorKind::kExponentOverflow, "block needs exponent " + std::to_string(e) +
                                                  ", format allows at most " + std::to_string(fmt.max_exponent()));
  }
  block.exponent = e;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double scaled = std::nearbyint(std::ldexp(values[i], -e));
    block.mantissas[i] = static_cast<std::int32_t>(std::clamp(scaled, -static_cast<double>(limit),
                                                              static_cast<double>(limit)));
  }
  return block;
}

inline double decode_element(const BfpBlock& block, std::size_t i) {
  return std::ldexp(static_cast<double>(block.mantissas[i]), block.exponent);
}

/// A tensor cast to blocks of n contiguous elements along one axis.
///
/// Blocked rows are enumerated in row-major order of the remaining axes; each
/// row owns ceil(shape[axis] / n) consecutive blocks, and its final block
/// carries padding_count zero mantissas that belong to no logical element.
struct BfpTensor {
  BfpFormat format;
  Shape logical_shape;
  std::size_t blocking_axis = 0;
  std::vector<BfpBlock> blocks;
  std::size_t padding_count = 0;

  std::size_t row_length() const { return logical_shape[blocking_axis]; }
  std::size_t blocks_per_row() const { return (row_length() + format.block_size - 1) / format.block_size; }

  bool operator==(const BfpTensor&) const = default;
};

namespace detail {

struct AxisGeometry {
  std::size_t outer = 1;
  std::size_t length = 0;
  std::size_t inner = 1;

  std::size_t rows() const { return outer * inner; }
  std::size_t flat_index(std::size_t row, std::size_t pos) const {
    const std::size_t o = row / inner;
    const std::size_t i = row % inner;
    return (o * length + pos) * inner + i;
  }
};

inline AxisGeometry axis_geometry(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw Error(ErrorKind::kShapeMismatch, "blocking axis " + std::to_string(axis) + " invalid for shape " +
                                               shape_string(shape));
  }
  AxisGeometry g;
  g.length = shape[axis];
  for (std::size_t d = 0; d < axis; ++d) g.outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) g.inner *= shape[d];
  return g;
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace detail

/// Number of blocks a tensor of this shape occupies.
inline std::size_t block_count(const Shape& shape, std::size_t axis, const BfpFormat& fmt) {
  const auto g = detail::axis_geometry(shape, axis);
  return g.rows() * detail::ceil_div(g.length, fmt.block_size);
}

inline BfpTensor quantize_tensor(const Tensor<double>& x, const BfpFormat& fmt, std::size_t blocking_axis) {
  fmt.validate();
  const auto g = detail::axis_geometry(x.shape, blocking_axis);
  const std::size_t per_row = detail::ceil_div(g.length, fmt.block_size);

  BfpTensor out{fmt, x.shape, blocking_axis, {}, per_row * fmt.block_size - g.length};
  out.blocks.reserve(g.rows() * per_row);
  std::vector<double> chunk;
  chunk.reserve(fmt.block_size);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t k = 0; k < per_row; ++k) {
      const std::size_t begin = k * fmt.block_size;
      const std::size_t end = std::min(begin + fmt.block_size, g.length);
      chunk.clear();
      for (std::size_t pos = begin; pos < end; ++pos) chunk.push_back(x.data[g.flat_index(r, pos)]);
      try {
        out.blocks.push_back(quantize_block(chunk, fmt));
      } catch (const Error& err) {
        throw Error(err.kind(), "row " + std::to_string(r) + ", block " + std::to_string(k) + ": " + err.what());
      }
    }
  }
  return out;
}

/// Checks the structural invariants of a BfpTensor.
inline void validate(const BfpTensor& t) {
  t.format.validate();
  const auto g = detail::axis_geometry(t.logical_shape, t.blocking_axis);
  const std::size_t per_row = detail::ceil_div(g.length, t.format.block_size);
  if (t.blocks.size() != g.rows() * per_row) {
    throw Error(ErrorKind::kShapeMismatch, "tensor of shape " + shape_string(t.logical_shape) + " needs " +
                                               std::to_string(g.rows() * per_row) + " blocks, has " +
                                               std::to_string(t.blocks.size()));
  }
  if (t.padding_count != per_row * t.format.block_size - g.length) {
    throw Error(ErrorKind::kShapeMismatch, "inconsistent padding_count " + std::to_string(t.padding_count));
  }
  for (const auto& block : t.blocks) {
    if (block.mantissas.size() != t.format.block_size) {
      throw Error(ErrorKind::kShapeMismatch, "block holds " + std::to_string(block.mantissas.size()) +
                                                 " mantissas, format needs " + std::to_string(t.format.block_size));
    }
  }
}

inline Tensor<double> dequantize(const BfpTensor& t) {
  validate(t);
  const auto g = detail::axis_geometry(t.logical_shape, t.blocking_axis);
  const std::size_t per_row = detail::ceil_div(g.length, t.format.block_size);
  Tensor<double> out(t.logical_shape);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t pos = 0; pos < g.length; ++pos) {
      const BfpBlock& block = t.blocks[r * per_row + pos / t.format.block_size];
      out.data[g.flat_index(r, pos)] = decode_element(block, pos % t.format.block_size);
    }
  }
  return out;
}

/// Dot product of two blocked vectors using integer mantissa products and
/// exponent addition. Mantissa widths may differ; block partitioning may not.
inline double bfp_dot(const BfpTensor& a, const BfpTensor& k) {
  validate(a);
  validate(k);
  if (a.logical_shape.size() != 1 || k.logical_shape.size() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "bfp_dot expects vectors, got " + shape_string(a.logical_shape) +
                                               " and " + shape_string(k.logical_shape));
  }
  if (a.logical_shape != k.logical_shape || a.format.block_size != k.format.block_size) {
    throw Error(ErrorKind::kShapeMismatch, "bfp_dot operands differ in length or block partitioning");
  }
  double result = 0.0;
  for (std::size_t b = 0; b < a.blocks.size(); ++b) {
    const auto& ma = a.blocks[b].mantissas;
    const auto& mk = k.blocks[b].mantissas;
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) acc += std::int64_t{ma[i]} * mk[i];
    result += std::ldexp(static_cast<double>(acc), a.blocks[b].exponent + k.blocks[b].exponent);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Packed layout
//
// Each block is one b-bit two's-complement exponent followed by n p-bit
// two's-complement mantissas, written LSB-first into a little-endian bit
// stream. Every block starts on a byte boundary, so a block occupies
// ceil((n*p + b) / 8) bytes and blocks follow each other without gaps.
// ---------------------------------------------------------------------------

struct PackedBuffer {
  std::vector<std::uint8_t> bytes;

  bool operator==(const PackedBuffer&) const = default;
};

inline std::size_t packed_size(const Shape& shape, std::size_t axis, const BfpFormat& fmt) {
  return block_count(shape, axis, fmt) * fmt.bytes_per_block();
}

namespace detail {

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void put(std::uint32_t value, int bits) {
    for (int i = 0; i < bits; ++i) {
      if (used_ == 0) out_.push_back(0);
      out_.back() |= static_cast<std::uint8_t>(((value >> i) & 1u) << used_);
      used_ = (used_ + 1) % 8;
    }
  }

  void align() { used_ = 0; }

 private:
  std::vector<std::uint8_t>& out_;
  int used_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::int32_t get_signed(int bits) {
    std::uint32_t v = 0;
    for (int i = 0; i < bits; ++i, ++pos_) {
      v |= static_cast<std::uint32_t>((in_[pos_ / 8] >> (pos_ % 8)) & 1u) << i;
    }
    const std::uint32_t sign = 1u << (bits - 1);
    return static_cast<std::int32_t>(v ^ sign) - static_cast<std::int32_t>(sign);
  }

  void align() { pos_ = (pos_ + 7) / 8 * 8; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::uint32_t twos_complement(std::int32_t v, int bits) {
  return static_cast<std::uint32_t>(v) & ((bits == 32) ? ~0u : ((1u << bits) - 1u));
}

}  // namespace detail

inline PackedBuffer pack(const BfpTensor& t) {
  validate(t);
  PackedBuffer buf;
  buf.bytes.reserve(t.blocks.size() * t.format.bytes_per_block());
  detail::BitWriter writer(buf.bytes);
  for (const auto& block : t.blocks) {
    writer.put(detail::twos_complement(block.exponent, t.format.exponent_bits), t.format.exponent_bits);
    for (std::int32_t m : block.mantissas) {
      writer.put(detail::twos_complement(m, t.format.mantissa_bits), t.format.mantissa_bits);
    }
    writer.align();
  }
  return buf;
}

inline BfpTensor unpack(std::span<const std::uint8_t> bytes, const BfpFormat& fmt, const Shape& shape,
                        std::size_t blocking_axis) {
  fmt.validate();
  const auto g = detail::axis_geometry(shape, blocking_axis);
  const std::size_t per_row = detail::ceil_div(g.length, fmt.block_size);
  const std::size_t expected = g.rows() * per_row * fmt.bytes_per_block();
  if (bytes.size() < expected) {
    throw Error(ErrorKind::kCorruptBuffer, "packed buffer truncated: " + std::to_string(bytes.size()) +
                                               " bytes, expected " + std::to_string(expected));
  }
  if (bytes.size() > expected) {
    throw Error(ErrorKind::kShapeMismatch, "packed buffer has " + std::to_string(bytes.size()) +
                                               " bytes, shape and format imply " + std::to_string(expected));
  }

  BfpTensor t{fmt, shape, blocking_axis, {}, per_row * fmt.block_size - g.length};
  t.blocks.reserve(g.rows() * per_row);
  detail::BitReader reader(bytes);
  const std::int32_t limit = fmt.max_mantissa();
  const std::size_t tail = g.length - (per_row == 0 ? 0 : (per_row - 1) * fmt.block_size);
  for (std::size_t b = 0; b < g.rows() * per_row; ++b) {
    BfpBlock block;
    block.exponent = reader.get_signed(fmt.exponent_bits);
    block.mantissas.resize(fmt.block_size);
    const std::size_t live = (b % per_row == per_row - 1) ? tail : fmt.block_size;
    for (std::size_t i = 0; i < fmt.block_size; ++i) {
      const std::int32_t m = reader.get_signed(fmt.mantissa_bits);
      if (m < -limit) {
        throw Error(ErrorKind::kCorruptBuffer, "block " + std::to_string(b) + " holds reserved mantissa " +
                                                   std::to_string(m));
      }
      if (i >= live && m != 0) {
        throw Error(ErrorKind::kCorruptBuffer, "block " + std::to_string(b) + " has a non-zero padding mantissa");
      }
      block.mantissas[i] = m;
    }
    reader.align();
    t.blocks.push_back(std::move(block));
  }
  return t;
}

}  // namespace bfpksort
