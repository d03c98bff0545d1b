// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale decode simulator for a single attention head.
//
// Keys are quantized into a block-floating-point K-cache one token at a time,
// blocked along the head dimension so a block never spans two tokens. Queries
// are quantized but never cached. Attention scores q_t . k_s (s <= t) are
// computed from dequantized values in double precision and compared with the
// unquantized scores.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bfpksort/bfp.hpp"
#include "bfpksort/error.hpp"
#include "bfpksort/ksort.hpp"
#include "bfpksort/rope.hpp"
#include "bfpksort/tensor.hpp"

namespace bfpksort {

/// A cache or query format; nullopt keeps values in double precision.
using CacheFormat = std::optional<BfpFormat>;

inline constexpr std::string_view kLosslessName = "FP-lossless";

inline std::string format_name(const CacheFormat& fmt) { return fmt ? fmt->name() : std::string(kLosslessName); }

inline CacheFormat parse_cache_format(std::string_view text) {
  if (text == kLosslessName) return std::nullopt;
  if (auto fmt = BfpFormat::parse(text)) return fmt;
  throw Error(ErrorKind::kInvalidConfig, "unknown format preset '" + std::string(text) + "'");
}

struct OutlierSpec {
  std::size_t n_outlier_channels = 4;
  double outlier_scale = 50.0;
  double base_std = 1.0;
  std::uint64_t seed = 0;

  void validate(std::size_t head_dim) const {
    if (n_outlier_channels > head_dim) {
      throw Error(ErrorKind::kInvalidConfig, std::to_string(n_outlier_channels) + " outlier channels exceed head dim " +
                                                 std::to_string(head_dim));
    }
    if (!(outlier_scale >= 1.0) || !std::isfinite(outlier_scale)) {
      throw Error(ErrorKind::kInvalidConfig, "outlier_scale must be finite and >= 1");
    }
    if (!(base_std > 0.0) || !std::isfinite(base_std)) {
      throw Error(ErrorKind::kInvalidConfig, "base_std must be finite and > 0");
    }
  }
};

namespace detail {

// Independent generator streams per purpose so weights and activations for
// one seed never share random draws.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

inline constexpr std::uint32_t kWeightStream = 1;
inline constexpr std::uint32_t kActivationStream = 2;

}  // namespace detail

/// Gaussian head whose W_k has a few rows scaled up, mimicking outlier key channels.
inline HeadWeights gen_outlier_head(std::size_t head_dim, std::size_t model_dim, const OutlierSpec& spec) {
  spec.validate(head_dim);
  auto rng = detail::make_rng(spec.seed, detail::kWeightStream);
  std::normal_distribution<double> gauss(0.0, spec.base_std);
  HeadWeights w{Matrix(head_dim, model_dim), Matrix(head_dim, model_dim), std::nullopt, std::nullopt};
  for (std::size_t r = 0; r < head_dim; ++r) {
    for (double& v : w.w_k.row(r)) v = gauss(rng);
  }
  for (std::size_t r = 0; r < head_dim; ++r) {
    for (double& v : w.w_q.row(r)) v = gauss(rng);
  }
  std::vector<std::size_t> rows(head_dim);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  for (std::size_t i = 0; i < spec.n_outlier_channels; ++i) {
    for (double& v : w.w_k.row(rows[i])) v *= spec.outlier_scale;
  }
  return w;
}

/// Standard-normal token activations, T x d_model.
inline Matrix gen_activations(std::size_t tokens, std::size_t model_dim, std::uint64_t seed) {
  auto rng = detail::make_rng(seed, detail::kActivationStream);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix x(tokens, model_dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (double& v : x.row(t)) v = gauss(rng);
  }
  return x;
}

/// Per-token append-only store of quantized head vectors, shape {T, d_h}.
class QuantizedRows {
 public:
  QuantizedRows(const BfpFormat& fmt, std::size_t head_dim) : tensor_{fmt, {0, head_dim}, 1, {}, 0} {
    fmt.validate();
    tensor_.padding_count = tensor_.blocks_per_row() * fmt.block_size - head_dim;
  }

  void append(std::span<const double> row) {
    const std::size_t d = tensor_.logical_shape[1];
    if (row.size() != d) {
      throw Error(ErrorKind::kShapeMismatch, "cache row of length " + std::to_string(row.size()) +
                                                 ", expected " + std::to_string(d));
    }
    const std::size_t n = tensor_.format.block_size;
    for (std::size_t begin = 0; begin < d; begin += n) {
      tensor_.blocks.push_back(quantize_block(row.subspan(begin, std::min(n, d - begin)), tensor_.format));
    }
    ++tensor_.logical_shape[0];
  }

  std::size_t size() const { return tensor_.logical_shape[0]; }
  const BfpTensor& tensor() const { return tensor_; }

  /// One token's vector as a standalone rank-1 tensor, for bfp_dot.
  BfpTensor row(std::size_t t) const {
    const std::size_t per_row = tensor_.blocks_per_row();
    BfpTensor out{tensor_.format, {tensor_.logical_shape[1]}, 0, {}, tensor_.padding_count};
    out.blocks.assign(tensor_.blocks.begin() + static_cast<std::ptrdiff_t>(t * per_row),
                      tensor_.blocks.begin() + static_cast<std::ptrdiff_t>((t + 1) * per_row));
    return out;
  }

 private:
  BfpTensor tensor_;
};

struct DecodeTrace {
  Matrix activations;
  /// k_t after bias and RoPE, before quantization; row t is token t.
  Matrix keys;
  Matrix queries;
  std::optional<QuantizedRows> key_cache;
  std::optional<QuantizedRows> quantized_queries;
  /// Dequantized cache contents (equal to `keys` for a lossless cache).
  Matrix key_values;
  Matrix query_values;
  /// scores[t][s] = q_t . k_s for s <= t, from dequantized values.
  std::vector<std::vector<double>> scores;
  /// Same scores from the unquantized vectors.
  std::vector<std::vector<double>> reference_scores;
  bool permuted = false;
};

namespace detail {

inline std::vector<double> project(const Matrix& w, const std::optional<std::vector<double>>& bias,
                                   std::span<const double> x) {
  auto y = matvec(w, x);
  if (bias) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += (*bias)[i];
  }
  return y;
}

inline void check_plan(const HeadWeights& weights, const std::optional<RopeTables>& rope,
                       const PermutationPlan& plan) {
  auto mismatch = [](const std::string& what) { throw Error(ErrorKind::kPlanMismatch, what); };
  if (plan.perm.size() != weights.head_dim()) mismatch("plan permutes a different head dimension");
  if (plan.weights.w_k != permute_rows(weights.w_k, plan.perm)) mismatch("plan W_k is not a row permutation of W_k");
  if (plan.weights.w_q != permute_rows(weights.w_q, plan.perm)) mismatch("plan W_q is not a row permutation of W_q");
  if (weights.b_k.has_value() != plan.weights.b_k.has_value() ||
      (weights.b_k && plan.perm.apply(*weights.b_k) != *plan.weights.b_k)) {
    mismatch("plan b_k does not match");
  }
  if (weights.b_q.has_value() != plan.weights.b_q.has_value() ||
      (weights.b_q && plan.perm.apply(*weights.b_q) != *plan.weights.b_q)) {
    mismatch("plan b_q does not match");
  }
  if (rope.has_value() != plan.rope.has_value()) mismatch("plan and run disagree on RoPE");
  if (rope && remap_rope_tables(*rope, plan.perm) != *plan.rope) mismatch("plan RoPE tables are not remapped from these");
}

}  // namespace detail

/// Runs T decode steps. With a plan, the plan's permuted weights and remapped
/// RoPE tables are used and the plan is first checked against `weights`.
inline DecodeTrace simulate_decode(const HeadWeights& weights, const std::optional<RopeTables>& rope,
                                   const Matrix& activations, const CacheFormat& fmt_k, const CacheFormat& fmt_q,
                                   const PermutationPlan* plan = nullptr) {
  weights.validate();
  const std::size_t d = weights.head_dim();
  const std::size_t tokens = activations.rows();
  if (activations.cols() != weights.model_dim()) {
    throw Error(ErrorKind::kShapeMismatch, "activations have " + std::to_string(activations.cols()) +
                                               " columns, model dim is " + std::to_string(weights.model_dim()));
  }
  if (rope) {
    validate(*rope);
    if (rope->dim() != d) throw Error(ErrorKind::kShapeMismatch, "RoPE tables do not match head dimension");
  }
  if (plan) detail::check_plan(weights, rope, *plan);

  const HeadWeights& w = plan ? plan->weights : weights;
  const std::optional<RopeTables>& tables = plan ? plan->rope : rope;

  DecodeTrace trace{activations, Matrix(tokens, d), Matrix(tokens, d), std::nullopt, std::nullopt,
                    Matrix(tokens, d), Matrix(tokens, d), {}, {}, plan != nullptr};
  if (fmt_k) trace.key_cache.emplace(*fmt_k, d);
  if (fmt_q) trace.quantized_queries.emplace(*fmt_q, d);
  trace.scores.resize(tokens);
  trace.reference_scores.resize(tokens);

  for (std::size_t t = 0; t < tokens; ++t) {
    auto k = detail::project(w.w_k, w.b_k, activations.row(t));
    auto q = detail::project(w.w_q, w.b_q, activations.row(t));
    if (tables) {
      k = rope_apply(*tables, k, t);
      q = rope_apply(*tables, q, t);
    }
    std::copy(k.begin(), k.end(), trace.keys.row(t).begin());
    std::copy(q.begin(), q.end(), trace.queries.row(t).begin());

    auto store = [](std::optional<QuantizedRows>& sink, std::span<const double> v, std::span<double> dst) {
      if (!sink) {
        std::copy(v.begin(), v.end(), dst.begin());
        return;
      }
      sink->append(v);
      const BfpTensor& bt = sink->tensor();
      const std::size_t per_row = bt.blocks_per_row();
      const std::size_t first = (sink->size() - 1) * per_row;
      for (std::size_t j = 0; j < dst.size(); ++j) {
        dst[j] = decode_element(bt.blocks[first + j / bt.format.block_size], j % bt.format.block_size);
      }
    };
    store(trace.key_cache, k, trace.key_values.row(t));
    store(trace.quantized_queries, q, trace.query_values.row(t));

    trace.scores[t].resize(t + 1);
    trace.reference_scores[t].resize(t + 1);
    for (std::size_t s = 0; s <= t; ++s) {
      trace.scores[t][s] = dot(trace.query_values.row(t), trace.key_values.row(s));
      trace.reference_scores[t][s] = dot(trace.queries.row(t), trace.keys.row(s));
    }
  }
  return trace;
}

/// Largest deviation between q_t . k_s computed with the original weights and
/// with the plan's weights, over all s <= t, in double precision.
///
/// Each deviation is divided by sum_j |q_j k_j| of the original product, the
/// scale of the rounding error of a length-d_h summation; dividing by |q . k|
/// instead is unbounded for scores that cancel to near zero.
inline double exactness_check(const HeadWeights& weights, const PermutationPlan& plan, const Matrix& activations,
                              const std::optional<RopeTables>& rope = std::nullopt) {
  weights.validate();
  plan.weights.validate();
  if (plan.weights.head_dim() != weights.head_dim() || plan.weights.model_dim() != weights.model_dim()) {
    throw Error(ErrorKind::kPlanMismatch, "plan weights have a different shape");
  }
  if (rope.has_value() != plan.rope.has_value()) {
    throw Error(ErrorKind::kPlanMismatch, "plan and check disagree on RoPE");
  }
  const std::size_t tokens = activations.rows();
  std::vector<std::vector<double>> q(tokens), k(tokens), qp(tokens), kp(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    q[t] = detail::project(weights.w_q, weights.b_q, activations.row(t));
    k[t] = detail::project(weights.w_k, weights.b_k, activations.row(t));
    qp[t] = detail::project(plan.weights.w_q, plan.weights.b_q, activations.row(t));
    kp[t] = detail::project(plan.weights.w_k, plan.weights.b_k, activations.row(t));
    if (rope) {
      q[t] = rope_apply(*rope, q[t], t);
      k[t] = rope_apply(*rope, k[t], t);
      qp[t] = rope_apply(*plan.rope, qp[t], t);
      kp[t] = rope_apply(*plan.rope, kp[t], t);
    }
  }
  double worst = 0.0;
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t s = 0; s <= t; ++s) {
      double scale = 0.0;
      for (std::size_t j = 0; j < q[t].size(); ++j) scale += std::fabs(q[t][j] * k[s][j]);
      const double diff = std::fabs(dot(q[t], k[s]) - dot(qp[t], kp[s]));
      if (diff == 0.0) continue;
      worst = std::max(worst, scale > 0.0 ? diff / scale : std::numeric_limits<double>::infinity());
    }
  }
  return worst;
}

/// Quantization error of one tensor over its logical (non-padding) elements.
struct TensorError {
  double mse = 0.0;
  /// +inf when the approximation is exact, NaN when the reference is all zero.
  double sqnr_db = 0.0;
  bool sqnr_defined = true;
  double max_abs_err = 0.0;
  std::size_t count = 0;
};

namespace detail {

// Sums non-negative terms in ascending order, so the result depends only on
// the multiset of terms and is unchanged by any reordering of channels.
inline double canonical_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double v : terms) acc += v;
  return acc;
}

}  // namespace detail

inline TensorError compare_values(std::span<const double> reference, std::span<const double> approx) {
  if (reference.size() != approx.size()) {
    throw Error(ErrorKind::kShapeMismatch, "reference has " + std::to_string(reference.size()) +
                                               " elements, approximation " + std::to_string(approx.size()));
  }
  TensorError err;
  err.count = reference.size();
  std::vector<double> noise(reference.size());
  std::vector<double> signal(reference.size());
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double diff = approx[i] - reference[i];
    noise[i] = diff * diff;
    signal[i] = reference[i] * reference[i];
    err.max_abs_err = std::max(err.max_abs_err, std::fabs(diff));
  }
  const double noise_power = detail::canonical_sum(std::move(noise));
  const double signal_power = detail::canonical_sum(std::move(signal));
  err.mse = err.count == 0 ? 0.0 : noise_power / static_cast<double>(err.count);
  if (signal_power == 0.0) {
    err.sqnr_defined = false;
    err.sqnr_db = std::numeric_limits<double>::quiet_NaN();
  } else if (noise_power == 0.0) {
    err.sqnr_db = std::numeric_limits<double>::infinity();
  } else {
    err.sqnr_db = 10.0 * std::log10(signal_power / noise_power);
  }
  return err;
}

/// Padding is stripped by dequantize, so only logical elements are compared.
inline TensorError error_metrics(const Tensor<double>& reference, const BfpTensor& quantized) {
  if (reference.shape != quantized.logical_shape) {
    throw Error(ErrorKind::kShapeMismatch, "reference shape " + shape_string(reference.shape) +
                                               " vs quantized shape " + shape_string(quantized.logical_shape));
  }
  const auto approx = dequantize(quantized);
  return compare_values(reference.data, approx.data);
}

/// Bytes of a per-head K-cache holding T tokens of d_h channels.
inline std::size_t footprint(std::size_t tokens, std::size_t head_dim, const BfpFormat& fmt) {
  fmt.validate();
  return tokens * ((head_dim + fmt.block_size - 1) / fmt.block_size) * fmt.bytes_per_block();
}

/// Largest |score - reference score| over a trace.
inline double logits_max_abs_err(const DecodeTrace& trace) {
  double worst = 0.0;
  for (std::size_t t = 0; t < trace.scores.size(); ++t) {
    for (std::size_t s = 0; s < trace.scores[t].size(); ++s) {
      worst = std::max(worst, std::fabs(trace.scores[t][s] - trace.reference_scores[t][s]));
    }
  }
  return worst;
}

/// Metrics for one experiment cell, with enough configuration to identify it.
struct ErrorReport {
  std::string format_q;
  std::string format_k;
  /// K block size; 0 for a lossless cache.
  std::size_t block_size = 0;
  bool sorted = false;
  std::uint64_t seed = 0;

  double mse = 0.0;
  double sqnr_db = 0.0;
  bool sqnr_defined = true;
  double max_abs_err = 0.0;
  double logits_max_abs_err = 0.0;
  /// K-cache storage cost; 64 for a lossless (double) cache.
  BitsPerElement bits_per_element{64, 1};
};

/// K-cache error and score error of a finished trace.
inline ErrorReport report_trace(const DecodeTrace& trace, const CacheFormat& fmt_q, const CacheFormat& fmt_k,
                                std::uint64_t seed) {
  ErrorReport r;
  r.format_q = format_name(fmt_q);
  r.format_k = format_name(fmt_k);
  r.block_size = fmt_k ? fmt_k->block_size : 0;
  r.sorted = trace.permuted;
  r.seed = seed;
  const TensorError err = compare_values(trace.keys.values(), trace.key_values.values());
  r.mse = err.mse;
  r.sqnr_db = err.sqnr_db;
  r.sqnr_defined = err.sqnr_defined;
  r.max_abs_err = err.max_abs_err;
  r.logits_max_abs_err = logits_max_abs_err(trace);
  if (fmt_k) r.bits_per_element = bits_per_element(*fmt_k);
  return r;
}

}  // namespace bfpksort
