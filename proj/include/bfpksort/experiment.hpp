// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment grid runner and report writer behind `bfpksort run`.
//
// A cell is one (format_q, format_k, seed) triple. Each cell simulates the
// same head and activations twice, with the original and with the sorted
// channel order, and yields an ErrorReport for both.

#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bfpksort/bfp.hpp"
#include "bfpksort/error.hpp"
#include "bfpksort/ksort.hpp"
#include "bfpksort/rope.hpp"
#include "bfpksort/simharness.hpp"
#include "bfpksort/tensorio.hpp"
#include "json.hpp"

namespace bfpksort {

struct FormatPair {
  CacheFormat q;
  CacheFormat k;

  bool operator==(const FormatPair&) const = default;
};

/// Lossless baseline plus BFP16_n queries against BFP12_n keys for n = 128, 64, 32.
inline std::vector<FormatPair> default_grid() {
  std::vector<FormatPair> grid{{std::nullopt, std::nullopt}};
  for (std::size_t n : {128, 64, 32}) grid.push_back({BfpFormat::bfp16(n), BfpFormat::bfp12(n)});
  return grid;
}

struct ExperimentConfig {
  std::size_t head_dim = 128;
  std::size_t model_dim = 256;
  std::size_t tokens = 64;
  OutlierSpec outliers;
  std::optional<std::string> import_wk;
  std::optional<std::string> import_wq;
  std::vector<FormatPair> grid = default_grid();
  SortOrder order = SortOrder::kAscending;
  bool rope = false;
  RopeLayout rope_layout = RopeLayout::kInterleaved;
  double rope_base = kDefaultRopeBase;
  std::vector<std::uint64_t> seeds = default_seeds();
  std::string out_dir = "report";
  /// 0 picks the number of hardware threads.
  std::size_t workers = 0;

  static std::vector<std::uint64_t> default_seeds() {
    std::vector<std::uint64_t> s(20);
    std::iota(s.begin(), s.end(), std::uint64_t{0});
    return s;
  }

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorKind::kInvalidConfig, what); };
    if (import_wk.has_value() != import_wq.has_value()) bad("import needs both wk and wq");
    if (!import_wk) {
      if (head_dim == 0 || model_dim == 0) bad("head_dim and model_dim must be positive");
      outliers.validate(head_dim);
    }
    if (rope && head_dim % 2 != 0 && !import_wk) bad("RoPE needs an even head_dim");
    if (seeds.empty()) bad("seeds must be non-empty");
    if (grid.empty()) bad("format grid must be non-empty");
    try {
      for (const auto& pair : grid) {
        if (pair.q) pair.q->validate();
        if (pair.k) pair.k->validate();
      }
    } catch (const Error& err) {
      bad(err.what());
    }
  }
};

/// Everything that affects results. Output location and worker count are
/// left out so reports from different directories or pool sizes compare equal.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["head_dim"] = c.head_dim;
  j["model_dim"] = c.model_dim;
  j["tokens"] = c.tokens;
  j["outliers"] = {{"n_outlier_channels", c.outliers.n_outlier_channels},
                   {"outlier_scale", c.outliers.outlier_scale},
                   {"base_std", c.outliers.base_std}};
  if (c.import_wk) {
    j["import"] = {{"wk", *c.import_wk}, {"wq", *c.import_wq}};
  } else {
    j["import"] = nullptr;
  }
  j["grid"] = nlohmann::json::array();
  for (const auto& pair : c.grid) j["grid"].push_back({{"q", format_name(pair.q)}, {"k", format_name(pair.k)}});
  j["order"] = std::string(to_string(c.order));
  j["rope"] = {{"enabled", c.rope}, {"layout", std::string(to_string(c.rope_layout))}, {"base", c.rope_base}};
  j["seeds"] = c.seeds;
  return j;
}

namespace detail {

inline std::uint64_t unsigned_field(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw Error(ErrorKind::kInvalidConfig, key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::size_t count_field(const nlohmann::json& j, const std::string& key, std::size_t fallback) {
  return j.contains(key) ? static_cast<std::size_t>(unsigned_field(j.at(key), key)) : fallback;
}

}  // namespace detail

/// Missing keys keep their defaults. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw Error(ErrorKind::kInvalidConfig, "config must be a JSON object");
    static const std::vector<std::string> known = {"head_dim", "model_dim", "tokens", "outliers", "import",
                                                   "grid",     "order",     "rope",   "seeds",    "out_dir",
                                                   "workers"};
    for (const auto& [key, _] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw Error(ErrorKind::kInvalidConfig, "unknown config key '" + key + "'");
      }
    }
    c.head_dim = detail::count_field(j, "head_dim", c.head_dim);
    c.model_dim = detail::count_field(j, "model_dim", c.model_dim);
    c.tokens = detail::count_field(j, "tokens", c.tokens);
    if (j.contains("outliers")) {
      const auto& o = j.at("outliers");
      c.outliers.n_outlier_channels = detail::count_field(o, "n_outlier_channels", c.outliers.n_outlier_channels);
      c.outliers.outlier_scale = o.value("outlier_scale", c.outliers.outlier_scale);
      c.outliers.base_std = o.value("base_std", c.outliers.base_std);
    }
    if (j.contains("import") && !j.at("import").is_null()) {
      c.import_wk = j.at("import").at("wk").get<std::string>();
      c.import_wq = j.at("import").at("wq").get<std::string>();
    }
    if (j.contains("grid")) {
      if (!j.at("grid").is_array()) throw Error(ErrorKind::kInvalidConfig, "grid must be an array");
      c.grid.clear();
      for (const auto& cell : j.at("grid")) {
        c.grid.push_back({parse_cache_format(cell.at("q").get<std::string>()),
                          parse_cache_format(cell.at("k").get<std::string>())});
      }
    }
    if (j.contains("order")) c.order = parse_sort_order(j.at("order").get<std::string>());
    if (j.contains("rope")) {
      const auto& r = j.at("rope");
      c.rope = r.value("enabled", c.rope);
      if (r.contains("layout")) c.rope_layout = parse_rope_layout(r.at("layout").get<std::string>());
      c.rope_base = r.value("base", c.rope_base);
    }
    if (j.contains("seeds")) {
      if (!j.at("seeds").is_array()) throw Error(ErrorKind::kInvalidConfig, "seeds must be an array");
      c.seeds.clear();
      for (const auto& s : j.at("seeds")) c.seeds.push_back(detail::unsigned_field(s, "seeds"));
    }
    c.out_dir = j.value("out_dir", c.out_dir);
    c.workers = detail::count_field(j, "workers", c.workers);
  } catch (const nlohmann::json::exception& err) {
    throw Error(ErrorKind::kInvalidConfig, err.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& err) {
    throw Error(ErrorKind::kInvalidConfig, path.string() + ": " + err.what());
  }
  return config_from_json(j);
}

/// BFPKSORT_SEED=<n> replaces the seed list with the single seed n.
inline void apply_env_overrides(ExperimentConfig& c) {
  const char* env = std::getenv("BFPKSORT_SEED");
  if (env == nullptr) return;
  std::uint64_t seed = 0;
  const std::string_view text(env);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), seed);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorKind::kInvalidConfig, "BFPKSORT_SEED is not an unsigned integer: '" + std::string(text) + "'");
  }
  c.seeds = {seed};
}

struct CellResult {
  FormatPair formats;
  std::uint64_t seed = 0;
  ErrorReport original;
  ErrorReport sorted;
  /// exactness_check of the plan used for the sorted run.
  double exactness = 0.0;
  std::optional<std::string> failure;
};

namespace detail {

struct HeadSource {
  std::optional<HeadWeights> imported;

  HeadWeights for_seed(const ExperimentConfig& c, std::uint64_t seed) const {
    if (imported) return *imported;
    OutlierSpec spec = c.outliers;
    spec.seed = seed;
    return gen_outlier_head(c.head_dim, c.model_dim, spec);
  }
};

inline CellResult run_cell(const ExperimentConfig& c, const HeadSource& source, const FormatPair& formats,
                           std::uint64_t seed) {
  CellResult cell{formats, seed, {}, {}, 0.0, std::nullopt};
  const HeadWeights weights = source.for_seed(c, seed);
  std::optional<RopeTables> rope;
  if (c.rope) rope = default_rope_tables(weights.head_dim(), c.rope_layout, c.rope_base);
  const Matrix x = gen_activations(c.tokens, weights.model_dim(), seed);
  const PermutationPlan plan = plan_head(weights, rope, c.order);
  cell.original = report_trace(simulate_decode(weights, rope, x, formats.k, formats.q), formats.q, formats.k, seed);
  cell.sorted =
      report_trace(simulate_decode(weights, rope, x, formats.k, formats.q, &plan), formats.q, formats.k, seed);
  cell.exactness = exactness_check(weights, plan, x, rope);
  return cell;
}

}  // namespace detail

/// Runs every cell on a worker pool. Results come back in grid-major, then
/// seed order regardless of scheduling. Failed cells carry a message instead
/// of metrics.
inline std::vector<CellResult> run_experiment(const ExperimentConfig& c) {
  c.validate();
  detail::HeadSource source;
  if (c.import_wk) {
    HeadWeights w{load_matrix(*c.import_wk), load_matrix(*c.import_wq), std::nullopt, std::nullopt};
    w.validate();
    source.imported = std::move(w);
  }

  std::vector<CellResult> results(c.grid.size() * c.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < results.size(); i = next++) {
      const FormatPair& formats = c.grid[i / c.seeds.size()];
      const std::uint64_t seed = c.seeds[i % c.seeds.size()];
      try {
        results[i] = detail::run_cell(c, source, formats, seed);
      } catch (const std::exception& err) {
        results[i] = CellResult{formats, seed, {}, {}, 0.0, std::string(err.what())};
      }
    }
  };
  std::size_t workers = c.workers != 0 ? c.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, results.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  return results;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form; "inf", "-inf" and "nan" for non-finite values.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline const std::string kReportCsvHeader =
    "format_q,format_k,seed,mse_original,mse_sorted,sqnr_db_original,sqnr_db_sorted,"
    "max_abs_err_original,max_abs_err_sorted,logits_max_abs_err_original,logits_max_abs_err_sorted,"
    "bits_per_element_k,exactness";

inline const std::string kSummaryCsvHeader =
    "format_q,format_k,seeds,median_mse_original,median_mse_sorted,median_mse_reduction,"
    "median_logits_err_original,median_logits_err_sorted,sorted_mse_wins";

inline std::string report_csv(const std::vector<CellResult>& cells) {
  std::ostringstream out;
  out << kReportCsvHeader << '\n';
  for (const auto& c : cells) {
    out << format_name(c.formats.q) << ',' << format_name(c.formats.k) << ',' << c.seed << ','
        << format_number(c.original.mse) << ',' << format_number(c.sorted.mse) << ','
        << format_number(c.original.sqnr_db) << ',' << format_number(c.sorted.sqnr_db) << ','
        << format_number(c.original.max_abs_err) << ',' << format_number(c.sorted.max_abs_err) << ','
        << format_number(c.original.logits_max_abs_err) << ',' << format_number(c.sorted.logits_max_abs_err) << ','
        << format_number(c.original.bits_per_element.value()) << ',' << format_number(c.exactness) << '\n';
  }
  return out.str();
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

/// Relative MSE reduction 1 - sorted/original; 0 when both are exact.
inline double mse_reduction(const CellResult& c) {
  if (c.original.mse == 0.0) return c.sorted.mse == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - c.sorted.mse / c.original.mse;
}

/// One row per format pair, aggregated over seeds in grid order.
inline std::string summary_csv(const std::vector<CellResult>& cells) {
  std::ostringstream out;
  out << kSummaryCsvHeader << '\n';
  std::vector<FormatPair> pairs;
  for (const auto& c : cells) {
    if (std::find(pairs.begin(), pairs.end(), c.formats) == pairs.end()) pairs.push_back(c.formats);
  }
  for (const auto& pair : pairs) {
    std::vector<double> mo, ms, red, lo, ls;
    std::size_t wins = 0;
    for (const auto& c : cells) {
      if (!(c.formats == pair)) continue;
      mo.push_back(c.original.mse);
      ms.push_back(c.sorted.mse);
      red.push_back(mse_reduction(c));
      lo.push_back(c.original.logits_max_abs_err);
      ls.push_back(c.sorted.logits_max_abs_err);
      wins += c.sorted.mse < c.original.mse ? 1 : 0;
    }
    out << format_name(pair.q) << ',' << format_name(pair.k) << ',' << mo.size() << ','
        << format_number(median(mo)) << ',' << format_number(median(ms)) << ',' << format_number(median(red)) << ','
        << format_number(median(lo)) << ',' << format_number(median(ls)) << ',' << wins << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const ErrorReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_number(v)); };
  return {{"format_q", r.format_q},
          {"format_k", r.format_k},
          {"block_size", r.block_size},
          {"sorted", r.sorted},
          {"seed", r.seed},
          {"mse", num(r.mse)},
          {"sqnr_db", num(r.sqnr_db)},
          {"sqnr_defined", r.sqnr_defined},
          {"max_abs_err", num(r.max_abs_err)},
          {"logits_max_abs_err", num(r.logits_max_abs_err)},
          {"bits_per_element",
           {{"numerator", r.bits_per_element.numerator},
            {"denominator", r.bits_per_element.denominator},
            {"value", r.bits_per_element.value()}}}};
}

/// Full per-cell detail with the resolved config embedded.
inline std::string report_json(const ExperimentConfig& config, const std::vector<CellResult>& cells) {
  nlohmann::json j;
  j["config"] = to_json(config);
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells) {
    for (const ErrorReport* r : {&c.original, &c.sorted}) {
      auto entry = to_json(*r);
      entry["exactness"] = c.exactness;
      j["cells"].push_back(std::move(entry));
    }
  }
  return j.dump(2) + "\n";
}

/// Writes report.csv, summary.csv and report.json into `dir`.
inline void write_reports(const ExperimentConfig& config, const std::vector<CellResult>& cells,
                          const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create output directory " + dir.string());
  auto write = [&](const char* name, const std::string& text) {
    write_file_atomic(dir / name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  write("report.csv", report_csv(cells));
  write("summary.csv", summary_csv(cells));
  write("report.json", report_json(config, cells));
}

}  // namespace bfpksort
