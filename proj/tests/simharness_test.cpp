// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

#include "bfpksort/simharness.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace bfpksort {
namespace {

constexpr std::size_t kHeadDim = 128;
constexpr std::size_t kModelDim = 256;
constexpr std::size_t kTokens = 64;

HeadWeights outlier_head(std::uint64_t seed, double scale = 50.0, std::size_t outliers = 4) {
  OutlierSpec spec;
  spec.n_outlier_channels = outliers;
  spec.outlier_scale = scale;
  spec.seed = seed;
  return gen_outlier_head(kHeadDim, kModelDim, spec);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no exception";
  return ErrorKind::kIo;
}

TEST(GenOutlierHeadTest, NoOutliersHasNoHeavyTail) {
  const auto w = outlier_head(1, 50.0, 0);
  const auto norms = row_norms(w.w_k);
  const auto [lo, hi] = std::minmax_element(norms.begin(), norms.end());
  EXPECT_LT(*hi / *lo, 1.5);
}

TEST(GenOutlierHeadTest, ScaledRowsStandOut) {
  const auto w = outlier_head(2, 100.0, 4);
  const auto norms = row_norms(w.w_k);
  const double med = median_of(norms);
  int big = 0;
  for (double n : norms) {
    if (n > 10 * med) {
      ++big;
      EXPECT_NEAR(n / med, 100.0, 20.0);
    }
  }
  EXPECT_EQ(big, 4);
  // W_q is untouched.
  const auto qn = row_norms(w.w_q);
  EXPECT_LT(*std::max_element(qn.begin(), qn.end()) / median_of(qn), 1.5);
}

TEST(GenOutlierHeadTest, DeterministicPerSeed) {
  EXPECT_EQ(outlier_head(3), outlier_head(3));
  EXPECT_NE(outlier_head(3), outlier_head(4));
  EXPECT_EQ(gen_activations(8, 16, 5), gen_activations(8, 16, 5));
}

TEST(GenOutlierHeadTest, RejectsBadSpec) {
  OutlierSpec spec;
  spec.n_outlier_channels = 9;
  EXPECT_EQ(kind_of([&] { gen_outlier_head(8, 4, spec); }), ErrorKind::kInvalidConfig);
  spec.n_outlier_channels = 1;
  spec.outlier_scale = 0.5;
  EXPECT_EQ(kind_of([&] { gen_outlier_head(8, 4, spec); }), ErrorKind::kInvalidConfig);
}

TEST(SimulateDecodeTest, LosslessScoresMatchReference) {
  const auto w = outlier_head(6);
  const auto x = gen_activations(16, kModelDim, 6);
  const auto trace = simulate_decode(w, std::nullopt, x, std::nullopt, std::nullopt);
  ASSERT_EQ(trace.scores.size(), 16u);
  for (std::size_t t = 0; t < 16; ++t) {
    ASSERT_EQ(trace.scores[t].size(), t + 1);
    for (std::size_t s = 0; s <= t; ++s) {
      EXPECT_NEAR(trace.scores[t][s], trace.reference_scores[t][s], 1e-10 * (1 + std::fabs(trace.reference_scores[t][s])));
    }
  }
  EXPECT_EQ(logits_max_abs_err(trace), 0.0);
  EXPECT_FALSE(trace.key_cache.has_value());
}

TEST(SimulateDecodeTest, KeysAreProjectedActivations) {
  const auto w = outlier_head(7);
  const auto x = gen_activations(4, kModelDim, 7);
  const auto trace = simulate_decode(w, std::nullopt, x, BfpFormat::bfp12(32), BfpFormat::bfp16(32));
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(std::vector<double>(trace.keys.row(t).begin(), trace.keys.row(t).end()), matvec(w.w_k, x.row(t)));
  }
  EXPECT_EQ(trace.key_cache->size(), 4u);
}

TEST(SimulateDecodeTest, IdentityPlanMatchesNoPlanBitwise) {
  const auto w = outlier_head(8);
  const auto x = gen_activations(kTokens, kModelDim, 8);
  const auto rope = default_rope_tables(kHeadDim, RopeLayout::kInterleaved);
  const PermutationPlan identity{SortOrder::kAscending, Permutation::identity(kHeadDim), w, rope};
  const auto a = simulate_decode(w, rope, x, BfpFormat::bfp12(32), BfpFormat::bfp16(32));
  const auto b = simulate_decode(w, rope, x, BfpFormat::bfp12(32), BfpFormat::bfp16(32), &identity);
  EXPECT_EQ(a.keys, b.keys);
  EXPECT_EQ(a.key_values, b.key_values);
  EXPECT_EQ(a.key_cache->tensor(), b.key_cache->tensor());
  EXPECT_EQ(a.scores, b.scores);
}

TEST(SimulateDecodeTest, RejectsForeignPlan) {
  const auto w = outlier_head(9);
  const auto other = outlier_head(10);
  const auto x = gen_activations(4, kModelDim, 9);
  const auto plan = plan_head(other, std::nullopt);
  EXPECT_EQ(kind_of([&] { simulate_decode(w, std::nullopt, x, std::nullopt, std::nullopt, &plan); }),
            ErrorKind::kPlanMismatch);
  const auto rope = default_rope_tables(kHeadDim, RopeLayout::kInterleaved);
  const auto own = plan_head(w, std::nullopt);
  EXPECT_EQ(kind_of([&] { simulate_decode(w, rope, x, std::nullopt, std::nullopt, &own); }), ErrorKind::kPlanMismatch);
  auto tampered = plan_head(w, rope);
  tampered.rope = remap_rope_tables(rope, tampered.perm, RemapMode::kLiteralArrayPermute);
  EXPECT_THROW(simulate_decode(w, rope, x, std::nullopt, std::nullopt, &tampered), Error);
}

TEST(SimulateDecodeTest, RejectsShapeMismatch) {
  const auto w = outlier_head(11);
  EXPECT_EQ(kind_of([&] { simulate_decode(w, std::nullopt, Matrix(2, 7), std::nullopt, std::nullopt); }),
            ErrorKind::kShapeMismatch);
}

TEST(SimulateDecodeTest, CacheAppendMatchesBatchQuantization) {
  const auto w = outlier_head(12);
  const auto x = gen_activations(kTokens, kModelDim, 12);
  for (std::size_t n : {32, 48, 128}) {
    const auto fmt = BfpFormat::bfp12(n);
    const auto trace = simulate_decode(w, std::nullopt, x, fmt, BfpFormat::bfp16(n));
    const auto batch = quantize_tensor(trace.keys.to_tensor(), fmt, 1);
    EXPECT_EQ(trace.key_cache->tensor(), batch) << "n=" << n;
    EXPECT_EQ(trace.key_values.to_tensor(), dequantize(batch));
  }
}

TEST(SimulateDecodeTest, ScoresAgreeWithBlockDot) {
  const auto w = outlier_head(13);
  const auto x = gen_activations(16, kModelDim, 13);
  const auto trace = simulate_decode(w, std::nullopt, x, BfpFormat::bfp12(32), BfpFormat::bfp16(32));
  for (std::size_t t = 0; t < 16; ++t) {
    for (std::size_t s = 0; s <= t; ++s) {
      const double exact = bfp_dot(trace.quantized_queries->row(t), trace.key_cache->row(s));
      double scale = 0.0;
      for (std::size_t j = 0; j < kHeadDim; ++j) scale += std::fabs(trace.query_values(t, j) * trace.key_values(s, j));
      ASSERT_LE(std::fabs(exact - trace.scores[t][s]), 1e-12 * scale);
    }
  }
}

TEST(SimulateDecodeTest, SortingIsANoOpAtFullHeadBlocks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = outlier_head(seed);
    const auto x = gen_activations(kTokens, kModelDim, seed);
    const auto plan = plan_head(w, std::nullopt);
    const auto fmt_k = BfpFormat::bfp12(kHeadDim);
    const auto fmt_q = BfpFormat::bfp16(kHeadDim);
    const auto a = report_trace(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q), fmt_q, fmt_k, seed);
    const auto b = report_trace(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q, &plan), fmt_q, fmt_k, seed);
    EXPECT_EQ(a.mse, b.mse);
    EXPECT_EQ(a.sqnr_db, b.sqnr_db);
    EXPECT_EQ(a.max_abs_err, b.max_abs_err);
    EXPECT_FALSE(a.sorted);
    EXPECT_TRUE(b.sorted);
  }
}

TEST(SimulateDecodeTest, SortingReducesKeyErrorOnModerateOutliers) {
  for (std::size_t n : {32, 64}) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto w = outlier_head(seed, 10.0);
      const auto x = gen_activations(kTokens, kModelDim, seed);
      const auto plan = plan_head(w, std::nullopt);
      const auto fmt_k = BfpFormat::bfp12(n);
      const auto fmt_q = BfpFormat::bfp16(n);
      const auto a = report_trace(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q), fmt_q, fmt_k, seed);
      const auto b = report_trace(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q, &plan), fmt_q, fmt_k, seed);
      wins += b.mse < a.mse;
    }
    EXPECT_GE(wins, 8) << "n=" << n;
  }
}

TEST(SimulateDecodeTest, SortingReducesMedianLogitErrorAtBfp12_64) {
  std::vector<double> unsorted, sorted;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = outlier_head(seed, 10.0);
    const auto x = gen_activations(kTokens, kModelDim, seed);
    const auto plan = plan_head(w, std::nullopt);
    const auto fmt_k = BfpFormat::bfp12(64);
    const auto fmt_q = BfpFormat::bfp16(64);
    unsorted.push_back(logits_max_abs_err(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q)));
    sorted.push_back(logits_max_abs_err(simulate_decode(w, std::nullopt, x, fmt_k, fmt_q, &plan)));
  }
  EXPECT_LT(median_of(sorted), median_of(unsorted));
}

TEST(ExactnessTest, WithoutRope) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = outlier_head(seed);
    const auto x = gen_activations(kTokens, kModelDim, seed);
    EXPECT_LE(exactness_check(w, plan_head(w, std::nullopt), x), 1e-12);
  }
}

TEST(ExactnessTest, WithRopeAndCorrectedRemap) {
  for (auto layout : {RopeLayout::kInterleaved, RopeLayout::kHalfSplit}) {
    const auto w = outlier_head(20);
    const auto x = gen_activations(kTokens, kModelDim, 20);
    const auto rope = default_rope_tables(kHeadDim, layout);
    EXPECT_LE(exactness_check(w, plan_head(w, rope), x, rope), 1e-12);
  }
}

TEST(ExactnessTest, WithBiases) {
  auto w = outlier_head(21);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> gauss(0.0, 1.0);
  w.b_k.emplace(kHeadDim);
  w.b_q.emplace(kHeadDim);
  for (double& v : *w.b_k) v = gauss(rng);
  for (double& v : *w.b_q) v = gauss(rng);
  const auto x = gen_activations(16, kModelDim, 21);
  const auto rope = default_rope_tables(kHeadDim, RopeLayout::kInterleaved);
  EXPECT_LE(exactness_check(w, plan_head(w, rope), x, rope), 1e-12);
}

TEST(ExactnessTest, LiteralRemapIsWrong) {
  const auto w = outlier_head(22);
  const auto x = gen_activations(kTokens, kModelDim, 22);
  const auto rope = default_rope_tables(kHeadDim, RopeLayout::kInterleaved);
  auto plan = plan_head(w, rope);
  plan.rope = remap_rope_tables(rope, plan.perm, RemapMode::kLiteralArrayPermute);
  EXPECT_GT(exactness_check(w, plan, x, rope), 0.1);
}

TEST(ExactnessTest, RejectsMismatchedRope) {
  const auto w = outlier_head(23);
  const auto x = gen_activations(4, kModelDim, 23);
  const auto rope = default_rope_tables(kHeadDim, RopeLayout::kInterleaved);
  EXPECT_EQ(kind_of([&] { exactness_check(w, plan_head(w, std::nullopt), x, rope); }), ErrorKind::kPlanMismatch);
}

TEST(ErrorMetricsTest, ExactIsInfiniteSqnr) {
  const Tensor<double> ref({2, 4}, {1, 2, 3, 4, -1, -2, -3, -4});
  const auto q = quantize_tensor(ref, BfpFormat::bfp16(4), 1);
  const auto err = error_metrics(ref, q);
  EXPECT_EQ(err.mse, 0.0);
  EXPECT_EQ(err.max_abs_err, 0.0);
  EXPECT_TRUE(std::isinf(err.sqnr_db));
  EXPECT_GT(err.sqnr_db, 0.0);
  EXPECT_TRUE(err.sqnr_defined);
  EXPECT_EQ(err.count, 8u);
}

TEST(ErrorMetricsTest, ZeroReferenceHasUndefinedSqnr) {
  const Tensor<double> ref({5}, std::vector<double>(5, 0.0));
  const auto err = error_metrics(ref, quantize_tensor(ref, BfpFormat::bfp12(4), 0));
  EXPECT_FALSE(err.sqnr_defined);
  EXPECT_TRUE(std::isnan(err.sqnr_db));
  EXPECT_EQ(err.mse, 0.0);
}

TEST(ErrorMetricsTest, KnownValues) {
  const std::vector<double> ref{3, 4};
  const std::vector<double> approx{3, 3};
  const auto err = compare_values(ref, approx);
  EXPECT_EQ(err.mse, 0.5);
  EXPECT_EQ(err.max_abs_err, 1.0);
  EXPECT_DOUBLE_EQ(err.sqnr_db, 10.0 * std::log10(25.0));
}

TEST(ErrorMetricsTest, IgnoresPadding) {
  const Tensor<double> ref({3}, {1.0, 0.3, -0.7});
  const auto q = quantize_tensor(ref, BfpFormat::bfp12(8), 0);
  EXPECT_EQ(error_metrics(ref, q).count, 3u);
}

TEST(ErrorMetricsTest, RejectsShapeMismatch) {
  const Tensor<double> ref({3}, {1.0, 0.3, -0.7});
  const auto q = quantize_tensor(Tensor<double>({4}, {1, 2, 3, 4}), BfpFormat::bfp12(8), 0);
  EXPECT_EQ(kind_of([&] { error_metrics(ref, q); }), ErrorKind::kShapeMismatch);
}

TEST(ErrorMetricsProperty, MorePrecisionLessError) {
  std::mt19937_64 rng(30);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int it = 0; it < 50; ++it) {
    Tensor<double> ref({16, 64});
    for (double& v : ref.data) v = gauss(rng);
    const auto lo = error_metrics(ref, quantize_tensor(ref, BfpFormat{4, 8, 32}, 1));
    const auto hi = error_metrics(ref, quantize_tensor(ref, BfpFormat{8, 8, 32}, 1));
    ASSERT_LT(hi.mse, lo.mse);
    ASSERT_GT(hi.sqnr_db, lo.sqnr_db);
  }
}

TEST(ErrorMetricsProperty, InvariantUnderReordering) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int it = 0; it < 50; ++it) {
    std::vector<double> ref(200), approx(200);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ref[i] = gauss(rng);
      approx[i] = ref[i] + 1e-3 * gauss(rng);
    }
    const auto before = compare_values(ref, approx);
    std::vector<std::size_t> idx(ref.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> ref2, approx2;
    for (std::size_t i : idx) {
      ref2.push_back(ref[i]);
      approx2.push_back(approx[i]);
    }
    const auto after = compare_values(ref2, approx2);
    ASSERT_EQ(before.mse, after.mse);
    ASSERT_EQ(before.sqnr_db, after.sqnr_db);
  }
}

TEST(FootprintTest, Examples) {
  EXPECT_EQ(footprint(1, 128, BfpFormat::bfp12(128)), 65u);
  EXPECT_EQ(footprint(1, 128, BfpFormat::bfp12(32)), 4u * 17u);
  EXPECT_EQ(footprint(1, 128, BfpFormat::bfp16(32)), 4u * 33u);
  EXPECT_EQ(footprint(0, 128, BfpFormat::bfp12(32)), 0u);
  EXPECT_EQ(footprint(10, 100, BfpFormat::bfp12(32)), 10u * 4u * 17u);
  const double ratio = static_cast<double>(footprint(64, 128, BfpFormat::bfp12(32))) /
                       static_cast<double>(footprint(64, 128, BfpFormat::bfp16(32)));
  EXPECT_DOUBLE_EQ(ratio, 17.0 / 33.0);
}

TEST(FootprintTest, MatchesPackedSize) {
  const auto w = outlier_head(40);
  const auto x = gen_activations(12, kModelDim, 40);
  for (std::size_t n : {16, 32, 100, 128}) {
    const auto fmt = BfpFormat::bfp12(n);
    const auto trace = simulate_decode(w, std::nullopt, x, fmt, std::nullopt);
    EXPECT_EQ(pack(trace.key_cache->tensor()).bytes.size(), footprint(12, kHeadDim, fmt)) << "n=" << n;
  }
}

TEST(ReportTraceTest, EchoesConfiguration) {
  const auto w = outlier_head(41);
  const auto x = gen_activations(4, kModelDim, 41);
  const CacheFormat fk = BfpFormat::bfp12(32), fq = BfpFormat::bfp16(32);
  const auto r = report_trace(simulate_decode(w, std::nullopt, x, fk, fq), fq, fk, 41);
  EXPECT_EQ(r.format_k, "BFP12_32");
  EXPECT_EQ(r.format_q, "BFP16_32");
  EXPECT_EQ(r.block_size, 32u);
  EXPECT_EQ(r.seed, 41u);
  EXPECT_EQ(r.bits_per_element, (BitsPerElement{17, 4}));
  EXPECT_GT(r.mse, 0.0);
  EXPECT_GE(r.logits_max_abs_err, 0.0);

  const auto lossless = report_trace(simulate_decode(w, std::nullopt, x, std::nullopt, std::nullopt), std::nullopt,
                                     std::nullopt, 41);
  EXPECT_EQ(lossless.format_k, "FP-lossless");
  EXPECT_EQ(lossless.block_size, 0u);
  EXPECT_EQ(lossless.mse, 0.0);
  EXPECT_TRUE(std::isinf(lossless.sqnr_db));
}

TEST(CacheFormatTest, Parse) {
  EXPECT_FALSE(parse_cache_format("FP-lossless").has_value());
  EXPECT_EQ(parse_cache_format("BFP12_64"), BfpFormat::bfp12(64));
  EXPECT_EQ(kind_of([] { parse_cache_format("FP32"); }), ErrorKind::kInvalidConfig);
}

}  // namespace
}  // namespace bfpksort
