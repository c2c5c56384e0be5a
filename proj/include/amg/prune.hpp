#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/cost_model.hpp"
#include "amg/criteria.hpp"
#include "amg/errors.hpp"
#include "amg/vit.hpp"

namespace amg {

struct ProtectedUnit {
  UnitKind kind = UnitKind::kHead;
  int layer = 0;
  int unit_id = 0;
};

struct PruneConfig {
  double head_rate = 0.0;
  double token_rate = 0.0;
  double lambda = 0.0;
  int head_iterations = 4;
  // Class tokens are protected unconditionally; these add further exclusions.
  std::vector<ProtectedUnit> protect;

  void validate(int layers) const {
    if (head_rate < 0.0 || head_rate >= 1.0) {
      throw ConfigError("head_rate must lie in [0,1), got " + std::to_string(head_rate));
    }
    if (token_rate < 0.0 || token_rate >= 1.0) {
      throw ConfigError("token_rate must lie in [0,1), got " + std::to_string(token_rate));
    }
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0, got " + std::to_string(lambda));
    if (layers > 0 && lambda * (layers - 1) >= 1.0) {
      throw ConfigError("lambda " + std::to_string(lambda) + " makes weight 1 - lambda*" +
                        std::to_string(layers - 1) + " non-positive");
    }
    if (head_iterations < 1) {
      throw ConfigError("head_iterations must be >= 1, got " + std::to_string(head_iterations));
    }
  }
};

// Layer weighting: weighted = raw * (1 - lambda*layer), layers
// indexed from zero. Raw values are preserved.
inline std::vector<ImportanceScore> weight_scores(std::vector<ImportanceScore> scores,
                                                  double lambda) {
  for (auto& s : scores) {
    const double w = 1.0 - lambda * s.layer;
    if (w <= 0.0) {
      throw ConfigError("lambda " + std::to_string(lambda) + " zeroes the weight of layer " +
                        std::to_string(s.layer));
    }
    s.weighted = s.raw * w;
  }
  return scores;
}

struct SkipEntry {
  UnitKind kind = UnitKind::kHead;
  int layer = 0;
  int unit_id = 0;
  double weighted = 0.0;
};

struct PrunePlan {
  UnitKind kind = UnitKind::kHead;
  int target = 0;
  std::vector<ImportanceScore> selected;  // in selection order
  std::vector<SkipEntry> skips;
  // Surviving unit count per layer after this plan: H_l for heads, N'_l
  // (retained kv tokens, class token included) for tokens.
  std::vector<int> resulting_units;

  std::map<int, std::vector<int>> by_layer() const {
    std::map<int, std::vector<int>> out;
    for (const auto& s : selected) out[s.layer].push_back(s.unit_id);
    for (auto& [layer, ids] : out) {
      (void)layer;
      std::sort(ids.begin(), ids.end());
    }
    return out;
  }
};

namespace detail {

// Heads are matched by original id, which survives slot renumbering across
// surgeries; tokens by absolute token index.
inline bool is_protected(const PruneConfig& config, const ImportanceScore& s) {
  const int id = s.kind == UnitKind::kHead ? s.original_id : s.unit_id;
  for (const auto& p : config.protect) {
    if (p.kind == s.kind && p.layer == s.layer && p.unit_id == id) return true;
  }
  return false;
}

// Greedy global selection with per-layer floors. Candidates arrive scored;
// heads are taken from the high end (dispersed attention first), tokens from
// the low end. A candidate whose layer is already at its floor is skipped and
// the next eligible one takes its place.
inline PrunePlan select_units(std::vector<ImportanceScore> candidates, UnitKind kind, int target,
                              std::map<int, int> removable) {
  PrunePlan plan;
  plan.kind = kind;
  plan.target = target;
  if (target == 0) return plan;

  const bool heads = kind == UnitKind::kHead;
  std::sort(candidates.begin(), candidates.end(),
            [heads](const ImportanceScore& a, const ImportanceScore& b) {
              if (a.weighted != b.weighted) {
                return heads ? a.weighted > b.weighted : a.weighted < b.weighted;
              }
              if (a.layer != b.layer) return a.layer < b.layer;
              return a.unit_id < b.unit_id;
            });

  std::map<int, int> taken;
  for (const auto& c : candidates) {
    if (static_cast<int>(plan.selected.size()) == target) break;
    if (taken[c.layer] >= removable[c.layer]) {
      plan.skips.push_back({kind, c.layer, c.unit_id, c.weighted});
      continue;
    }
    plan.selected.push_back(c);
    ++taken[c.layer];
  }
  if (static_cast<int>(plan.selected.size()) < target) {
    std::set<int> binding;
    for (const auto& s : plan.skips) binding.insert(s.layer);
    throw InfeasiblePlanError(
        "target of " + std::to_string(target) + " exceeds removable capacity " +
            std::to_string(plan.selected.size()),
        std::vector<int>(binding.begin(), binding.end()));
  }
  return plan;
}

}  // namespace detail

// Global plan for an explicit removal count. Scores must cover every eligible
// unit of the kind exactly once; the capture supplies the per-layer structure
// the floors are checked against.
inline PrunePlan build_plan_count(const AttentionCapture& cap, const PruneConfig& config,
                                  UnitKind kind, int count,
                                  std::vector<ImportanceScore> scores) {
  if (count < 0) throw ContractError("plan count must be >= 0");
  auto weighted = weight_scores(std::move(scores), config.lambda);

  std::vector<ImportanceScore> eligible;
  std::map<int, int> eligible_per_layer;
  for (auto& s : weighted) {
    if (detail::is_protected(config, s)) continue;
    ++eligible_per_layer[s.layer];
    eligible.push_back(s);
  }
  std::map<int, int> removable;
  for (int l = 0; l < cap.layer_count(); ++l) {
    // Floors: every layer keeps >= 1 head and >= 2 kv tokens (class token
    // plus one more). Protected units shrink the pool further.
    const int floor_cap =
        kind == UnitKind::kHead
            ? cap.heads[static_cast<std::size_t>(l)] - 1
            : static_cast<int>(cap.kv_indices[static_cast<std::size_t>(l)].size()) - 2;
    removable[l] = std::max(0, std::min(floor_cap, eligible_per_layer[l]));
  }
  PrunePlan plan = detail::select_units(std::move(eligible), kind, count, removable);

  auto grouped = plan.by_layer();
  for (int l = 0; l < cap.layer_count(); ++l) {
    const int before = kind == UnitKind::kHead
                           ? cap.heads[static_cast<std::size_t>(l)]
                           : static_cast<int>(cap.kv_indices[static_cast<std::size_t>(l)].size());
    const auto it = grouped.find(l);
    const int removed = it == grouped.end() ? 0 : static_cast<int>(it->second.size());
    plan.resulting_units.push_back(before - removed);
  }
  return plan;
}

// Unit base for the rate: every unit of the kind, protected ones included, so
// a 25% token rate removes a quarter of all key/value positions.
inline int plan_unit_total(const AttentionCapture& cap, UnitKind kind) {
  int total = 0;
  for (int l = 0; l < cap.layer_count(); ++l) {
    total += kind == UnitKind::kHead
                 ? cap.heads[static_cast<std::size_t>(l)]
                 : static_cast<int>(cap.kv_indices[static_cast<std::size_t>(l)].size());
  }
  return total;
}

inline PrunePlan build_plan(const AttentionCapture& cap, const PruneConfig& config, UnitKind kind,
                            std::vector<ImportanceScore> scores) {
  config.validate(cap.layer_count());
  const double rate = kind == UnitKind::kHead ? config.head_rate : config.token_rate;
  const int count = static_cast<int>(std::llround(rate * plan_unit_total(cap, kind)));
  return build_plan_count(cap, config, kind, count, std::move(scores));
}

struct PruneReport {
  std::string kind;  // "head" or "token"
  int target = 0;
  double rate = 0.0;
  double lambda = 0.0;
  std::vector<PrunePlan> steps;
  std::vector<int> heads_before, heads_after;
  std::vector<int> kv_before, kv_after;
  CostReport cost_before, cost_after;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "amg-prune-1";
    j["kind"] = kind;
    j["target"] = target;
    j["rate"] = rate;
    j["lambda"] = lambda;
    j["tie_break"] = "weighted score, then layer asc, then unit asc";
    nlohmann::json steps_json = nlohmann::json::array();
    for (const auto& step : steps) {
      nlohmann::json s;
      s["target"] = step.target;
      nlohmann::json sel = nlohmann::json::array();
      for (const auto& e : step.selected) {
        sel.push_back({{"kind", unit_kind_name(e.kind)},
                       {"layer", e.layer},
                       {"unit", e.unit_id},
                       {"original_id", e.original_id},
                       {"raw", e.raw},
                       {"weighted", e.weighted}});
      }
      s["selected"] = std::move(sel);
      nlohmann::json skips = nlohmann::json::array();
      for (const auto& e : step.skips) {
        skips.push_back({{"kind", unit_kind_name(e.kind)},
                         {"layer", e.layer},
                         {"unit", e.unit_id},
                         {"weighted", e.weighted}});
      }
      s["skips"] = std::move(skips);
      s["resulting_units"] = step.resulting_units;
      steps_json.push_back(std::move(s));
    }
    j["steps"] = std::move(steps_json);
    j["structure"] = {{"heads_before", heads_before},
                      {"heads_after", heads_after},
                      {"kv_before", kv_before},
                      {"kv_after", kv_after}};
    j["cost_before"] = cost_before.to_json();
    j["cost_after"] = cost_after.to_json();
    return j;
  }
};

namespace detail {

inline std::vector<int> per_layer_kv(const ModelSpec& spec) {
  std::vector<int> out;
  for (int l = 0; l < spec.layers; ++l) out.push_back(spec.kv_count(l));
  return out;
}

}  // namespace detail

// Iterative head pruning: the target count is split ceil-first across
// head_iterations steps, and the model is re-calibrated and re-scored on its
// surgically pruned weights between steps. Weights are frozen throughout;
// between_steps lets a caller interleave fine-tuning.
inline PruneReport execute_head_plan(
    VitModel& model, const std::vector<Batch>& calibration, const PruneConfig& config,
    EntropySource source = EntropySource::kAveragedMap,
    const std::function<void(VitModel&, int)>& between_steps = {}) {
  config.validate(model.spec.layers);
  PruneReport report;
  report.kind = "head";
  report.rate = config.head_rate;
  report.lambda = config.lambda;
  report.heads_before = model.spec.heads_per_layer;
  report.kv_before = detail::per_layer_kv(model.spec);
  report.cost_before = analytical_cost(model.spec);

  int total = 0, capacity = 0;
  for (int l = 0; l < model.spec.layers; ++l) {
    total += model.spec.heads(l);
    int protected_here = 0;
    for (const auto& p : config.protect) {
      if (p.kind == UnitKind::kHead && p.layer == l) ++protected_here;
    }
    capacity += std::max(0, std::min(model.spec.heads(l) - 1,
                                     model.spec.heads(l) - protected_here));
  }
  const int target = static_cast<int>(std::llround(config.head_rate * total));
  report.target = target;
  if (target > capacity) {
    std::vector<int> all_layers;
    for (int l = 0; l < model.spec.layers; ++l) all_layers.push_back(l);
    throw InfeasiblePlanError("head target " + std::to_string(target) +
                                  " exceeds removable capacity " + std::to_string(capacity) +
                                  " (every layer keeps one head)",
                              all_layers);
  }

  int remaining = target;
  for (int it = 0; it < config.head_iterations && remaining > 0; ++it) {
    const int steps_left = config.head_iterations - it;
    const int quota = (remaining + steps_left - 1) / steps_left;
    auto cap = calibrate(model, calibration, false);
    PrunePlan plan = build_plan_count(cap, config, UnitKind::kHead, quota,
                                      head_scores(cap, source));
    for (const auto& [layer, slots] : plan.by_layer()) remove_heads(model, layer, slots);
    report.steps.push_back(std::move(plan));
    remaining -= quota;
    if (remaining > 0 && between_steps) between_steps(model, it);
  }

  report.heads_after = model.spec.heads_per_layer;
  report.kv_after = detail::per_layer_kv(model.spec);
  report.cost_after = analytical_cost(model.spec);
  return report;
}

// Single-shot token pruning: one calibration with gradients, one global plan,
// then the retained kv index set of each touched layer is installed.
inline PruneReport execute_token_plan(
    VitModel& model, const std::vector<Batch>& calibration, const PruneConfig& config,
    TokenCriterion criterion = TokenCriterion::kGradientAttention,
    TokenReduction reduction = TokenReduction::kColumn) {
  config.validate(model.spec.layers);
  PruneReport report;
  report.kind = "token";
  report.rate = config.token_rate;
  report.lambda = config.lambda;
  report.heads_before = model.spec.heads_per_layer;
  report.kv_before = detail::per_layer_kv(model.spec);
  report.cost_before = analytical_cost(model.spec);

  int total = 0;
  for (int l = 0; l < model.spec.layers; ++l) total += model.spec.kv_count(l);
  const int target = static_cast<int>(std::llround(config.token_rate * total));
  report.target = target;

  if (target > 0) {
    auto cap = calibrate(model, calibration, true);
    PrunePlan plan = build_plan_count(cap, config, UnitKind::kToken, target,
                                      token_scores(cap, criterion, reduction));
    auto grouped = plan.by_layer();
    for (const auto& [layer, removed] : grouped) {
      std::vector<int> keep;
      for (int t : cap.kv_indices[static_cast<std::size_t>(layer)]) {
        if (!std::binary_search(removed.begin(), removed.end(), t)) keep.push_back(t);
      }
      apply_kv_index(model, layer, keep);
    }
    report.steps.push_back(std::move(plan));
  }

  report.heads_after = model.spec.heads_per_layer;
  report.kv_after = detail::per_layer_kv(model.spec);
  report.cost_after = analytical_cost(model.spec);
  return report;
}

}  // namespace amg
