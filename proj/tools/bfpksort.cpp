// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// bfpksort: experiment runner, offline channel-sort pass and tensor file inspector.
//
//   bfpksort run --config <path> [--out-dir <path>] [--workers N] [--order asc|desc]
//   bfpksort plan --wk <tensorfile> --wq <tensorfile> --out <plan.json> [--order asc|desc]
//                 [--rope interleaved|half-split] [--rope-base B] [--out-wk F] [--out-wq F]
//   bfpksort inspect <tensorfile>
//
// Exit codes: 0 success, 1 runtime or IO failure, 2 usage or config error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <variant>

#include "CLI11.hpp"
#include "bfpksort/experiment.hpp"
#include "bfpksort/ksort.hpp"
#include "bfpksort/plan_json.hpp"
#include "bfpksort/tensorio.hpp"

namespace {

using namespace bfpksort;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

int exit_code_for(const Error& err) {
  return err.kind() == ErrorKind::kInvalidConfig ? kExitUsage : kExitFailure;
}

struct RunArgs {
  std::string config;
  std::string out_dir;
  std::size_t workers = 0;
  std::string order;
};

int cmd_run(const RunArgs& args) {
  ExperimentConfig config = load_config(args.config);
  apply_env_overrides(config);
  if (!args.out_dir.empty()) config.out_dir = args.out_dir;
  if (args.workers != 0) config.workers = args.workers;
  if (!args.order.empty()) config.order = parse_sort_order(args.order);

  const auto start = std::chrono::steady_clock::now();
  const auto cells = run_experiment(config);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  int failed = 0;
  for (const auto& c : cells) {
    if (c.failure) {
      ++failed;
      std::cerr << "cell " << format_name(c.formats.q) << "/" << format_name(c.formats.k) << " seed " << c.seed
                << " failed: " << *c.failure << "\n";
    }
  }
  if (failed != 0) {
    std::cerr << failed << " of " << cells.size() << " cells failed; no report written\n";
    return kExitFailure;
  }
  write_reports(config, cells, config.out_dir);
  std::cerr << cells.size() << " cells in " << seconds << " s, reports in " << config.out_dir << "\n";
  std::cout << summary_csv(cells);
  return 0;
}

struct PlanArgs {
  std::string wk;
  std::string wq;
  std::string out;
  std::string order = "asc";
  std::string rope;
  double rope_base = kDefaultRopeBase;
  std::string out_wk;
  std::string out_wq;
};

int cmd_plan(const PlanArgs& args) {
  HeadWeights weights{load_matrix(args.wk), load_matrix(args.wq), std::nullopt, std::nullopt};
  std::optional<RopeTables> rope;
  if (!args.rope.empty()) rope = default_rope_tables(weights.head_dim(), parse_rope_layout(args.rope), args.rope_base);
  const PermutationPlan plan = plan_head(weights, rope, parse_sort_order(args.order));

  const std::string text = to_json(record_of(plan)).dump(2) + "\n";
  write_file_atomic(args.out, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  if (!args.out_wk.empty()) save(args.out_wk, plan.weights.w_k.to_tensor());
  if (!args.out_wq.empty()) save(args.out_wq, plan.weights.w_q.to_tensor());
  std::cerr << "plan for " << weights.head_dim() << "x" << weights.model_dim() << " head written to " << args.out
            << (plan.perm.is_identity() ? " (identity)" : "") << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  const auto bytes = read_file(path);
  const TensorFileHeader h = parse_header(bytes);
  static const char* dtype_names[] = {"float64", "float32", "packed-bfp"};
  std::cout << "file:          " << path << "\n"
            << "version:       " << h.version << "\n"
            << "dtype:         " << static_cast<std::uint32_t>(h.dtype) << " ("
            << dtype_names[static_cast<std::uint32_t>(h.dtype)] << ")\n"
            << "shape:         " << shape_string(h.dims) << "\n";
  if (h.dtype == DType::kPackedBfp) {
    const auto bpe = bits_per_element(h.format);
    std::cout << "format:        " << h.format.name() << " (p=" << h.format.mantissa_bits
              << ", b=" << h.format.exponent_bits << ", n=" << h.format.block_size << ")\n"
              << "blocking axis: " << h.blocking_axis << "\n"
              << "blocks:        " << block_count(h.dims, h.blocking_axis, h.format) << "\n"
              << "bits/element:  " << bpe.numerator << "/" << bpe.denominator << " = " << bpe.value() << "\n";
  }
  std::cout << "header bytes:  " << h.header_size << "\n"
            << "payload bytes: " << h.payload_size << "\n";
  char crc[16];
  std::snprintf(crc, sizeof(crc), "0x%08x", h.header_crc);
  std::cout << "header crc32:  " << crc << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel sorting for block-floating-point K-cache quantization"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run an experiment grid and write CSV/JSON reports");
  run->add_option("--config", run_args.config, "Experiment config (JSON)")->required();
  run->add_option("--out-dir", run_args.out_dir, "Report directory (overrides config)");
  run->add_option("--workers", run_args.workers, "Worker threads (default: hardware threads)");
  run->add_option("--order", run_args.order, "Channel sort order")->check(CLI::IsMember({"asc", "desc"}));

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Compute the channel permutation for one head");
  plan->add_option("--wk", plan_args.wk, "W_k tensor file (d_h x d_model)")->required();
  plan->add_option("--wq", plan_args.wq, "W_q tensor file (d_h x d_model)")->required();
  plan->add_option("--out", plan_args.out, "Output plan JSON")->required();
  plan->add_option("--order", plan_args.order, "Channel sort order")->check(CLI::IsMember({"asc", "desc"}));
  plan->add_option("--rope", plan_args.rope, "Remap RoPE tables of this layout")
      ->check(CLI::IsMember({"interleaved", "half-split"}));
  plan->add_option("--rope-base", plan_args.rope_base, "RoPE frequency base");
  plan->add_option("--out-wk", plan_args.out_wk, "Write permuted W_k to this tensor file");
  plan->add_option("--out-wq", plan_args.out_wq, "Write permuted W_q to this tensor file");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print a tensor file header");
  inspect->add_option("file", inspect_path, "Tensor file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) return cmd_run(run_args);
    if (*plan) return cmd_plan(plan_args);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const Error& err) {
    std::cerr << "bfpksort: " << err.what() << "\n";
    return exit_code_for(err);
  } catch (const std::exception& err) {
    std::cerr << "bfpksort: " << err.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
