// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Rotary positional embedding over an explicit channel layout.
//
// Every channel j is rotated together with its partner channel:
//   out[j] = x[j] * cos(m * theta[j]) + sign[j] * x[partner[j]] * sin(m * theta[j])
// Driving the rotation from tables instead of a fixed pairing lets the same
// kernel run on channels that were reordered at compile time.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bfpksort/error.hpp"

namespace bfpksort {

enum class RopeLayout {
  /// Adjacent channel pairs (0,1), (2,3), ...
  kInterleaved,
  /// Channel j pairs with j + d/2, frequencies repeat once per half.
  kHalfSplit,
};

inline std::string_view to_string(RopeLayout layout) {
  return layout == RopeLayout::kInterleaved ? "interleaved" : "half-split";
}

inline RopeLayout parse_rope_layout(std::string_view text) {
  if (text == "interleaved") return RopeLayout::kInterleaved;
  if (text == "half-split" || text == "half_split") return RopeLayout::kHalfSplit;
  throw Error(ErrorKind::kInvalidConfig, "unknown RoPE layout '" + std::string(text) + "'");
}

inline constexpr double kDefaultRopeBase = 10000.0;

struct RopeTables {
  std::vector<double> theta;
  std::vector<std::size_t> partner;
  std::vector<int> sign;

  std::size_t dim() const { return theta.size(); }

  bool operator==(const RopeTables&) const = default;
};

/// Throws InvalidRopeTables unless partner is a fixed-point-free involution,
/// signs are +-1 and opposite across each pair, and paired channels share a
/// frequency.
inline void validate(const RopeTables& t) {
  const std::size_t d = t.theta.size();
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidRopeTables, what); };
  if (t.partner.size() != d || t.sign.size() != d) fail("theta, partner and sign lengths differ");
  if (d % 2 != 0) fail("head dimension must be even, got " + std::to_string(d));
  for (std::size_t j = 0; j < d; ++j) {
    const std::size_t p = t.partner[j];
    if (p >= d) fail("partner[" + std::to_string(j) + "] out of range");
    if (p == j) fail("channel " + std::to_string(j) + " is its own partner");
    if (t.partner[p] != j) fail("partner is not an involution at channel " + std::to_string(j));
    if (t.sign[j] != 1 && t.sign[j] != -1) fail("sign[" + std::to_string(j) + "] is not +-1");
    if (t.sign[j] != -t.sign[p]) fail("signs of pair (" + std::to_string(j) + ", " + std::to_string(p) + ") agree");
    if (!std::isfinite(t.theta[j])) fail("theta[" + std::to_string(j) + "] is not finite");
    if (t.theta[j] != t.theta[p]) fail("pair (" + std::to_string(j) + ", " + std::to_string(p) + ") frequencies differ");
  }
}

/// Frequencies theta_i = base^(-2(i-1)/d) for pair i = 1..d/2, laid out per `layout`.
inline RopeTables default_rope_tables(std::size_t d, RopeLayout layout, double base = kDefaultRopeBase) {
  if (d == 0 || d % 2 != 0) {
    throw Error(ErrorKind::kInvalidRopeTables, "head dimension must be even and positive, got " + std::to_string(d));
  }
  if (!(base > 0.0) || !std::isfinite(base)) {
    throw Error(ErrorKind::kInvalidRopeTables, "RoPE base must be positive and finite");
  }
  const std::size_t half = d / 2;
  RopeTables t{std::vector<double>(d), std::vector<std::size_t>(d), std::vector<int>(d)};
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const std::size_t lo = layout == RopeLayout::kInterleaved ? 2 * i : i;
    const std::size_t hi = layout == RopeLayout::kInterleaved ? 2 * i + 1 : i + half;
    t.theta[lo] = t.theta[hi] = freq;
    t.partner[lo] = hi;
    t.partner[hi] = lo;
    t.sign[lo] = -1;
    t.sign[hi] = 1;
  }
  return t;
}

/// Rotates a query or key head vector to token position m.
inline std::vector<double> rope_apply(const RopeTables& tables, std::span<const double> x, std::size_t m) {
  if (x.size() != tables.dim()) {
    throw Error(ErrorKind::kShapeMismatch, "rope_apply: vector length " + std::to_string(x.size()) +
                                               " != table dimension " + std::to_string(tables.dim()));
  }
  std::vector<double> out(x.size());
  const double pos = static_cast<double>(m);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double angle = pos * tables.theta[j];
    out[j] = x[j] * std::cos(angle) + static_cast<double>(tables.sign[j]) * x[tables.partner[j]] * std::sin(angle);
  }
  return out;
}

}  // namespace bfpksort
