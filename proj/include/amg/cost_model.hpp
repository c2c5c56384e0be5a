#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/instrument.hpp"
#include "amg/model_spec.hpp"
#include "amg/vit.hpp"

namespace amg {

// One MAC is one FLOP; softmax, scaling and divisions are not counted.
inline constexpr const char* kMacConvention =
    "1 multiply-accumulate = 1 FLOP; softmax, scaling and division excluded";

struct LayerCost {
  int layer = 0;
  int heads = 0;      // H_l
  int kv_tokens = 0;  // N'_l
  long long msa_params = 0;
  long long msa_flops_analytical = 0;
  // Instrumented decomposition (valid when the report was measured).
  long long qkv_macs = 0;
  long long attention_macs = 0;
  long long output_macs = 0;
  long long msa_flops_instrumented = 0;
  // Instrumented minus analytical is exactly this, by construction: the
  // analytical model projects K/V for retained tokens only, while the
  // implementation projects all N and gathers afterwards.
  long long projection_placement_delta = 0;
  long long mlp_flops = 0;  // informational
};

struct CostReport {
  std::string convention = kMacConvention;
  bool instrumented = false;
  int tokens = 0;  // N
  int embed_dim = 0;
  int head_dim = 0;
  std::vector<LayerCost> layers;
  long long msa_params_total = 0;
  long long msa_flops_analytical_total = 0;
  long long msa_flops_instrumented_total = 0;
  long long projection_placement_delta_total = 0;
  long long mlp_flops_total = 0;
  long long other_macs = 0;  // embedding + classifier, measured runs only

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "amg-cost-1";
    j["convention"] = convention;
    j["instrumented"] = instrumented;
    j["geometry"] = {{"tokens", tokens},
                     {"embed_dim", embed_dim},
                     {"head_dim", head_dim},
                     {"layers", static_cast<int>(layers.size())}};
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& l : layers) {
      nlohmann::json r;
      r["layer"] = l.layer;
      r["heads"] = l.heads;
      r["kv_tokens"] = l.kv_tokens;
      r["msa_params"] = l.msa_params;
      r["msa_flops_analytical"] = l.msa_flops_analytical;
      r["mlp_flops"] = l.mlp_flops;
      if (instrumented) {
        r["qkv_macs"] = l.qkv_macs;
        r["attention_macs"] = l.attention_macs;
        r["output_macs"] = l.output_macs;
        r["msa_flops_instrumented"] = l.msa_flops_instrumented;
        r["projection_placement_delta"] = l.projection_placement_delta;
      }
      rows.push_back(r);
    }
    j["layers"] = rows;
    nlohmann::json t;
    t["msa_params"] = msa_params_total;
    t["msa_flops_analytical"] = msa_flops_analytical_total;
    t["mlp_flops"] = mlp_flops_total;
    if (instrumented) {
      t["msa_flops_instrumented"] = msa_flops_instrumented_total;
      t["projection_placement_delta"] = projection_placement_delta_total;
      t["other_macs"] = other_macs;
    }
    j["totals"] = t;
    return j;
  }

  std::string table() const {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "MAC convention: %s\n", convention.c_str());
    out += line;
    std::snprintf(line, sizeof(line), "%5s %6s %6s %14s %16s %16s\n", "layer", "heads", "kv",
                  "msa_params", "msa_analytical", instrumented ? "msa_measured" : "");
    out += line;
    for (const auto& l : layers) {
      if (instrumented) {
        std::snprintf(line, sizeof(line), "%5d %6d %6d %14lld %16lld %16lld\n", l.layer, l.heads,
                      l.kv_tokens, l.msa_params, l.msa_flops_analytical, l.msa_flops_instrumented);
      } else {
        std::snprintf(line, sizeof(line), "%5d %6d %6d %14lld %16lld\n", l.layer, l.heads,
                      l.kv_tokens, l.msa_params, l.msa_flops_analytical);
      }
      out += line;
    }
    if (instrumented) {
      std::snprintf(line, sizeof(line), "%5s %6s %6s %14lld %16lld %16lld\n", "total", "", "",
                    msa_params_total, msa_flops_analytical_total, msa_flops_instrumented_total);
    } else {
      std::snprintf(line, sizeof(line), "%5s %6s %6s %14lld %16lld\n", "total", "", "",
                    msa_params_total, msa_flops_analytical_total);
    }
    out += line;
    return out;
  }
};

// Per-layer MSA cost from geometry alone: params 4*D*H_l*d, flops
// 2*N'_l*H_l*d*(2D+N) with N'_l the retained key/value count.
inline CostReport analytical_cost(const ModelSpec& spec) {
  spec.validate();
  CostReport report;
  report.tokens = spec.tokens();
  report.embed_dim = spec.embed_dim;
  report.head_dim = spec.head_dim;
  const long long N = spec.tokens();
  const long long D = spec.embed_dim;
  const long long d = spec.head_dim;
  const long long M = spec.mlp_hidden();
  for (int l = 0; l < spec.layers; ++l) {
    LayerCost c;
    c.layer = l;
    c.heads = spec.heads(l);
    c.kv_tokens = spec.kv_count(l);
    const long long H = c.heads;
    const long long Np = c.kv_tokens;
    c.msa_params = 4 * D * H * d;
    c.msa_flops_analytical = 2 * Np * H * d * (2 * D + N);
    c.mlp_flops = 2 * N * D * M;
    report.layers.push_back(c);
    report.msa_params_total += c.msa_params;
    report.msa_flops_analytical_total += c.msa_flops_analytical;
    report.mlp_flops_total += c.mlp_flops;
  }
  return report;
}

// Runs one single-sample forward pass under the MAC counter and lays the
// measured per-component counts beside the analytical model.
inline CostReport instrumented_cost(const VitModel& model, const Tensor& sample) {
  if (sample.rank() != 4 || sample.dim(0) != 1) {
    throw ContractError("instrumented_cost expects a single-sample batch [1,C,S,S], got " +
                        shape_str(sample.shape()));
  }
  CostReport report = analytical_cost(model.spec);
  report.instrumented = true;
  MacCounter counter;
  {
    MacCounterScope scope(counter);
    model.forward(sample);
  }
  const long long N = model.spec.tokens();
  const long long D = model.spec.embed_dim;
  const long long d = model.spec.head_dim;
  for (auto& c : report.layers) {
    c.qkv_macs = counter.at(c.layer, CostComponent::kQkvProjection);
    c.attention_macs = counter.at(c.layer, CostComponent::kAttentionProduct);
    c.output_macs = counter.at(c.layer, CostComponent::kOutputProjection);
    c.msa_flops_instrumented = c.qkv_macs + c.attention_macs + c.output_macs;
    c.projection_placement_delta = 4 * (N - c.kv_tokens) * D * c.heads * d;
    c.mlp_flops = counter.at(c.layer, CostComponent::kMlp);
    report.msa_flops_instrumented_total += c.msa_flops_instrumented;
    report.projection_placement_delta_total += c.projection_placement_delta;
  }
  report.mlp_flops_total = 0;
  for (const auto& c : report.layers) report.mlp_flops_total += c.mlp_flops;
  report.other_macs = counter.at(-1, CostComponent::kEmbedding) +
                      counter.at(-1, CostComponent::kClassifier);
  return report;
}

}  // namespace amg
