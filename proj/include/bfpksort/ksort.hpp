// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Compile-time channel reordering for one attention head.
//
// Rows of W_k are sorted by Euclidean norm and the same permutation is applied
// to W_q, so q . k is unchanged while channels of similar magnitude end up in
// the same quantization block of the K-cache. When RoPE is used the frequency,
// partner and sign tables are remapped so the rotation still pairs the right
// channels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bfpksort/error.hpp"
#include "bfpksort/rope.hpp"
#include "bfpksort/tensor.hpp"

namespace bfpksort {

/// Maps new channel position j to the old channel index source(j).
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<std::size_t> source) : source_(std::move(source)) {
    std::vector<bool> seen(source_.size(), false);
    for (std::size_t j = 0; j < source_.size(); ++j) {
      const std::size_t s = source_[j];
      if (s >= source_.size() || seen[s]) {
        throw Error(ErrorKind::kInvalidPermutation, "not a bijection on 0.." + std::to_string(source_.size()) +
                                                        " (position " + std::to_string(j) + ")");
      }
      seen[s] = true;
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> s(n);
    std::iota(s.begin(), s.end(), std::size_t{0});
    return Permutation(std::move(s));
  }

  std::size_t size() const { return source_.size(); }
  std::size_t operator[](std::size_t j) const { return source_[j]; }
  const std::vector<std::size_t>& source() const { return source_; }

  Permutation inverse() const {
    std::vector<std::size_t> inv(source_.size());
    for (std::size_t j = 0; j < source_.size(); ++j) inv[source_[j]] = j;
    return Permutation(std::move(inv));
  }

  bool is_identity() const {
    for (std::size_t j = 0; j < source_.size(); ++j) {
      if (source_[j] != j) return false;
    }
    return true;
  }

  /// out[j] = v[source(j)]
  template <class T>
  std::vector<T> apply(std::span<const T> v) const {
    check_length(v.size());
    std::vector<T> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[source_[j]];
    return out;
  }
  template <class T>
  std::vector<T> apply(const std::vector<T>& v) const {
    return apply(std::span<const T>(v));
  }

  bool operator==(const Permutation&) const = default;

 private:
  void check_length(std::size_t n) const {
    if (n != source_.size()) {
      throw Error(ErrorKind::kShapeMismatch, "permutation of size " + std::to_string(source_.size()) +
                                                 " applied to length " + std::to_string(n));
    }
  }

  std::vector<std::size_t> source_;
};

enum class SortOrder { kAscending, kDescending };

inline std::string_view to_string(SortOrder order) {
  return order == SortOrder::kAscending ? "asc" : "desc";
}

inline SortOrder parse_sort_order(std::string_view text) {
  if (text == "asc" || text == "ascending") return SortOrder::kAscending;
  if (text == "desc" || text == "descending") return SortOrder::kDescending;
  throw Error(ErrorKind::kInvalidConfig, "unknown sort order '" + std::string(text) + "'");
}

/// Projection weights of one head. Rows are output channels.
struct HeadWeights {
  Matrix w_k;
  Matrix w_q;
  std::optional<std::vector<double>> b_k;
  std::optional<std::vector<double>> b_q;

  std::size_t head_dim() const { return w_k.rows(); }
  std::size_t model_dim() const { return w_k.cols(); }

  void validate() const {
    if (w_k.rows() != w_q.rows() || w_k.cols() != w_q.cols()) {
      throw Error(ErrorKind::kShapeMismatch, "W_k is " + std::to_string(w_k.rows()) + "x" +
                                                 std::to_string(w_k.cols()) + " but W_q is " +
                                                 std::to_string(w_q.rows()) + "x" + std::to_string(w_q.cols()));
    }
    if (b_k && b_k->size() != w_k.rows()) throw Error(ErrorKind::kShapeMismatch, "b_k length differs from head dim");
    if (b_q && b_q->size() != w_q.rows()) throw Error(ErrorKind::kShapeMismatch, "b_q length differs from head dim");
  }

  bool operator==(const HeadWeights&) const = default;
};

inline std::vector<double> row_norms(const Matrix& w) {
  std::vector<double> norms(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double sum = 0.0;
    for (double v : w.row(r)) {
      if (!std::isfinite(v)) throw Error(ErrorKind::kInvalidValue, "non-finite weight in row " + std::to_string(r));
      sum += v * v;
    }
    norms[r] = std::sqrt(sum);
  }
  return norms;
}

/// Stable argsort; equal norms keep their original relative order in both directions.
inline Permutation argsort_norms(std::span<const double> norms, SortOrder order = SortOrder::kAscending) {
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!std::isfinite(norms[i])) throw Error(ErrorKind::kInvalidValue, "non-finite norm at " + std::to_string(i));
  }
  std::vector<std::size_t> idx(norms.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (order == SortOrder::kAscending) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
  }
  return Permutation(std::move(idx));
}

inline Matrix permute_rows(const Matrix& w, const Permutation& perm) {
  if (perm.size() != w.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "permutation of size " + std::to_string(perm.size()) +
                                               " applied to " + std::to_string(w.rows()) + " rows");
  }
  Matrix out(w.rows(), w.cols());
  for (std::size_t j = 0; j < w.rows(); ++j) {
    std::copy(w.row(perm[j]).begin(), w.row(perm[j]).end(), out.row(j).begin());
  }
  return out;
}

enum class RemapMode {
  /// partner'[j] = inv[partner[src[j]]]: keeps each rotation pair intact.
  kCorrected,
  /// partner'[j] = partner[src[j]]: permutes the partner array without
  /// renaming its entries. Breaks the pairing for most permutations; kept to
  /// demonstrate why the renaming is needed.
  kLiteralArrayPermute,
};

inline RopeTables remap_rope_tables(const RopeTables& tables, const Permutation& perm,
                                    RemapMode mode = RemapMode::kCorrected) {
  validate(tables);
  if (perm.size() != tables.dim()) {
    throw Error(ErrorKind::kShapeMismatch, "permutation of size " + std::to_string(perm.size()) +
                                               " applied to RoPE tables of dimension " + std::to_string(tables.dim()));
  }
  RopeTables out{perm.apply(tables.theta), perm.apply(tables.partner), perm.apply(tables.sign)};
  if (mode == RemapMode::kCorrected) {
    const Permutation inv = perm.inverse();
    for (auto& p : out.partner) p = inv[p];
  }
  return out;
}

/// The result of reordering one head's channels.
struct PermutationPlan {
  SortOrder order = SortOrder::kAscending;
  Permutation perm;
  HeadWeights weights;
  std::optional<RopeTables> rope;

  bool operator==(const PermutationPlan&) const = default;
};

inline PermutationPlan plan_head(const HeadWeights& weights, const std::optional<RopeTables>& rope,
                                 SortOrder order = SortOrder::kAscending) {
  weights.validate();
  if (rope && rope->dim() != weights.head_dim()) {
    throw Error(ErrorKind::kShapeMismatch, "RoPE tables of dimension " + std::to_string(rope->dim()) +
                                               " for head dimension " + std::to_string(weights.head_dim()));
  }
  PermutationPlan plan;
  plan.order = order;
  const auto norms = row_norms(weights.w_k);
  plan.perm = argsort_norms(norms, order);
  plan.weights.w_k = permute_rows(weights.w_k, plan.perm);
  plan.weights.w_q = permute_rows(weights.w_q, plan.perm);
  if (weights.b_k) plan.weights.b_k = plan.perm.apply(*weights.b_k);
  if (weights.b_q) plan.weights.b_q = plan.perm.apply(*weights.b_q);
  if (rope) plan.rope = remap_rope_tables(*rope, plan.perm);
  return plan;
}

}  // namespace bfpksort
