// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

// JSON form of a permutation plan, so the reordering pass can be stored and
// audited separately from the weights it was computed from.
//
// {
//   "head_dim": 128, "model_dim": 4096, "order": "asc",
//   "perm": [..],                                  // perm[j] = old channel at new position j
//   "rope": null | {"theta": [..], "partner": [..], "sign": [..]}
// }

#pragma once

#include <optional>
#include <string>

#include "bfpksort/error.hpp"
#include "bfpksort/ksort.hpp"
#include "bfpksort/rope.hpp"
#include "json.hpp"

namespace bfpksort {

/// The serializable part of a PermutationPlan; weights are re-derived on load.
struct PlanRecord {
  std::size_t head_dim = 0;
  std::size_t model_dim = 0;
  SortOrder order = SortOrder::kAscending;
  Permutation perm;
  std::optional<RopeTables> rope;

  bool operator==(const PlanRecord&) const = default;
};

inline PlanRecord record_of(const PermutationPlan& plan) {
  return {plan.weights.head_dim(), plan.weights.model_dim(), plan.order, plan.perm, plan.rope};
}

inline nlohmann::json to_json(const PlanRecord& rec) {
  nlohmann::json j;
  j["head_dim"] = rec.head_dim;
  j["model_dim"] = rec.model_dim;
  j["order"] = std::string(to_string(rec.order));
  j["perm"] = rec.perm.source();
  if (rec.rope) {
    j["rope"] = {{"theta", rec.rope->theta}, {"partner", rec.rope->partner}, {"sign", rec.rope->sign}};
  } else {
    j["rope"] = nullptr;
  }
  return j;
}

inline PlanRecord plan_record_from_json(const nlohmann::json& j) {
  try {
    PlanRecord rec;
    rec.head_dim = j.at("head_dim").get<std::size_t>();
    rec.model_dim = j.at("model_dim").get<std::size_t>();
    rec.order = parse_sort_order(j.at("order").get<std::string>());
    rec.perm = Permutation(j.at("perm").get<std::vector<std::size_t>>());
    if (rec.perm.size() != rec.head_dim) throw Error(ErrorKind::kInvalidPermutation, "perm length != head_dim");
    const auto& rope = j.at("rope");
    if (!rope.is_null()) {
      rec.rope = RopeTables{rope.at("theta").get<std::vector<double>>(),
                            rope.at("partner").get<std::vector<std::size_t>>(), rope.at("sign").get<std::vector<int>>()};
      validate(*rec.rope);
      if (rec.rope->dim() != rec.head_dim) throw Error(ErrorKind::kInvalidRopeTables, "RoPE dimension != head_dim");
    }
    return rec;
  } catch (const nlohmann::json::exception& err) {
    throw Error(ErrorKind::kInvalidConfig, std::string("malformed plan JSON: ") + err.what());
  }
}

/// Rebuilds the full plan for `weights` from a stored record.
inline PermutationPlan apply_record(const HeadWeights& weights, const PlanRecord& rec) {
  weights.validate();
  if (weights.head_dim() != rec.head_dim || weights.model_dim() != rec.model_dim) {
    throw Error(ErrorKind::kPlanMismatch, "plan was recorded for a " + std::to_string(rec.head_dim) + "x" +
                                              std::to_string(rec.model_dim) + " head");
  }
  PermutationPlan plan;
  plan.order = rec.order;
  plan.perm = rec.perm;
  plan.weights.w_k = permute_rows(weights.w_k, rec.perm);
  plan.weights.w_q = permute_rows(weights.w_q, rec.perm);
  if (weights.b_k) plan.weights.b_k = rec.perm.apply(*weights.b_k);
  if (weights.b_q) plan.weights.b_q = rec.perm.apply(*weights.b_q);
  plan.rope = rec.rope;
  return plan;
}

}  // namespace bfpksort
