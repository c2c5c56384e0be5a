#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "amg/checkpoint.hpp"
#include "amg/dataset.hpp"
#include "amg/prune.hpp"

using amg::AttentionCapture;
using amg::Batch;
using amg::DatasetConfig;
using amg::ImportanceScore;
using amg::ModelSpec;
using amg::PruneConfig;
using amg::PrunePlan;
using amg::SyntheticDataset;
using amg::UnitKind;
using amg::VitModel;

namespace {

ImportanceScore score(UnitKind kind, int layer, int unit, double raw) {
  ImportanceScore s;
  s.kind = kind;
  s.layer = layer;
  s.unit_id = unit;
  s.original_id = unit;
  s.raw = raw;
  s.weighted = raw;
  s.samples = 1;
  return s;
}

// Structure-only capture for scheduler tests; score lists are supplied by the
// test, so no attention maps are needed.
AttentionCapture fake_capture(std::vector<int> heads, std::vector<int> kv_counts) {
  AttentionCapture cap;
  cap.samples = 1;
  cap.has_gradients = true;
  cap.heads = std::move(heads);
  for (int h : cap.heads) {
    std::vector<int> ids;
    for (int i = 0; i < h; ++i) ids.push_back(i);
    cap.head_ids.push_back(ids);
  }
  int max_kv = 0;
  for (int n : kv_counts) {
    std::vector<int> kv;
    for (int i = 0; i < n; ++i) kv.push_back(i);
    cap.kv_indices.push_back(kv);
    max_kv = std::max(max_kv, n);
  }
  cap.tokens = max_kv;
  return cap;
}

ModelSpec toy_spec() {
  return ModelSpec::uniform(16, 4, 32, 4, 4, 8, 4);
}

// L=2, H=5 per layer: ten heads total.
ModelSpec ten_head_spec() {
  return ModelSpec::uniform(8, 4, 8, 2, 5, 4, 3);
}

DatasetConfig data_for(const ModelSpec& spec) {
  DatasetConfig cfg;
  cfg.image_size = spec.image_size;
  cfg.channels = spec.channels;
  cfg.num_classes = spec.num_classes;
  cfg.train_size = 8;
  cfg.val_size = 4;
  cfg.seed = 3;
  return cfg;
}

std::vector<Batch> calib(const ModelSpec& spec) {
  SyntheticDataset ds(data_for(spec));
  return {ds.make_batch(0, {0, 1, 2, 3})};
}

}  // namespace

TEST_CASE("weight scores", "[prune]") {
  std::vector<ImportanceScore> scores = {score(UnitKind::kToken, 0, 1, 2.0),
                                         score(UnitKind::kToken, 3, 2, 0.5)};
  SECTION("lambda zero keeps raw") {
    auto out = amg::weight_scores(scores, 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(out[i].weighted == scores[i].raw);
      REQUIRE(out[i].raw == scores[i].raw);
    }
  }
  SECTION("direct formula") {
    auto out = amg::weight_scores({score(UnitKind::kHead, 10, 0, 1.0)}, 0.05);
    REQUIRE(out[0].weighted == Catch::Approx(0.5).epsilon(1e-12));
    REQUIRE(out[0].raw == 1.0);
  }
  SECTION("equal raws rank the deeper layer lower") {
    auto out = amg::weight_scores(
        {score(UnitKind::kToken, 2, 0, 1.0), score(UnitKind::kToken, 9, 0, 1.0)}, 0.05);
    REQUIRE(out[1].weighted < out[0].weighted);
    REQUIRE(out[0].weighted == Catch::Approx(0.9).epsilon(1e-12));
    REQUIRE(out[1].weighted == Catch::Approx(0.55).epsilon(1e-12));
  }
  SECTION("non-positive weight is a config error") {
    REQUIRE_THROWS_AS(amg::weight_scores({score(UnitKind::kHead, 10, 0, 1.0)}, 0.1),
                      amg::ConfigError);
    REQUIRE_THROWS_AS(amg::weight_scores({score(UnitKind::kHead, 20, 0, 1.0)}, 0.05),
                      amg::ConfigError);
  }
}

TEST_CASE("config validation", "[prune]") {
  PruneConfig cfg;
  REQUIRE_NOTHROW(cfg.validate(4));
  SECTION("rates stay in the unit interval") {
    cfg.head_rate = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(4), amg::ConfigError);
    cfg.head_rate = -0.1;
    REQUIRE_THROWS_AS(cfg.validate(4), amg::ConfigError);
    cfg.head_rate = 0.0;
    cfg.token_rate = 1.5;
    REQUIRE_THROWS_AS(cfg.validate(4), amg::ConfigError);
  }
  SECTION("lambda feasibility guard") {
    cfg.lambda = 0.26;
    REQUIRE_THROWS_AS(cfg.validate(5), amg::ConfigError);
    cfg.lambda = 0.24;
    REQUIRE_NOTHROW(cfg.validate(5));
    cfg.lambda = -0.01;
    REQUIRE_THROWS_AS(cfg.validate(5), amg::ConfigError);
  }
  SECTION("iterations") {
    cfg.head_iterations = 0;
    REQUIRE_THROWS_AS(cfg.validate(4), amg::ConfigError);
  }
}

TEST_CASE("plan for hand-scored heads", "[prune]") {
  SECTION("rate zero gives an empty plan") {
    auto cap = fake_capture({2, 2}, {5, 5});
    PruneConfig cfg;
    auto plan = amg::build_plan(cap, cfg, UnitKind::kHead,
                                {score(UnitKind::kHead, 0, 0, 1.0), score(UnitKind::kHead, 0, 1, 2.0),
                                 score(UnitKind::kHead, 1, 0, 3.0), score(UnitKind::kHead, 1, 1, 4.0)});
    REQUIRE(plan.target == 0);
    REQUIRE(plan.selected.empty());
    REQUIRE(plan.skips.empty());
    REQUIRE(plan.resulting_units == std::vector<int>{2, 2});
  }
  SECTION("three layers of two heads") {
    // Entropies L0:(1,5) L1:(4,4.5) L2:(2,6); rate 1/3 of six heads = two.
    // Highest entropies first: (L2,h1)=6 then (L0,h1)=5.
    auto cap = fake_capture({2, 2, 2}, {5, 5, 5});
    PruneConfig cfg;
    cfg.head_rate = 1.0 / 3.0;
    auto plan = amg::build_plan(
        cap, cfg, UnitKind::kHead,
        {score(UnitKind::kHead, 0, 0, 1.0), score(UnitKind::kHead, 0, 1, 5.0),
         score(UnitKind::kHead, 1, 0, 4.0), score(UnitKind::kHead, 1, 1, 4.5),
         score(UnitKind::kHead, 2, 0, 2.0), score(UnitKind::kHead, 2, 1, 6.0)});
    REQUIRE(plan.target == 2);
    REQUIRE(plan.selected.size() == 2);
    REQUIRE(plan.selected[0].layer == 2);
    REQUIRE(plan.selected[0].unit_id == 1);
    REQUIRE(plan.selected[1].layer == 0);
    REQUIRE(plan.selected[1].unit_id == 1);
    REQUIRE(plan.skips.empty());
    REQUIRE(plan.resulting_units == std::vector<int>{1, 2, 1});
  }
  SECTION("vit-base head quarter") {
    // 12 layers of 12 heads, rate 25% -> remove 36, leaving 108.
    std::vector<ImportanceScore> scores;
    for (int l = 0; l < 12; ++l) {
      for (int h = 0; h < 12; ++h) {
        scores.push_back(score(UnitKind::kHead, l, h, 0.001 * (l * 12 + h)));
      }
    }
    auto cap = fake_capture(std::vector<int>(12, 12), std::vector<int>(12, 197));
    PruneConfig cfg;
    cfg.head_rate = 0.25;
    auto plan = amg::build_plan(cap, cfg, UnitKind::kHead, scores);
    REQUIRE(plan.target == 36);
    REQUIRE(plan.selected.size() == 36);
    int survivors = 0;
    for (int n : plan.resulting_units) {
      REQUIRE(n >= 1);
      survivors += n;
    }
    REQUIRE(survivors == 108);
  }
}

TEST_CASE("plan for hand-scored tokens", "[prune]") {
  SECTION("lowest importance goes first") {
    // One layer of five kv tokens (class + four). Rate 25% of five rounds to
    // one removal: token 2 at importance 0.1.
    auto cap = fake_capture({2}, {5});
    PruneConfig cfg;
    cfg.token_rate = 0.25;
    auto plan = amg::build_plan(cap, cfg, UnitKind::kToken,
                                {score(UnitKind::kToken, 0, 1, 0.9), score(UnitKind::kToken, 0, 2, 0.1),
                                 score(UnitKind::kToken, 0, 3, 0.5), score(UnitKind::kToken, 0, 4, 0.7)});
    REQUIRE(plan.target == 1);
    REQUIRE(plan.selected.size() == 1);
    REQUIRE(plan.selected[0].unit_id == 2);
    REQUIRE(plan.resulting_units == std::vector<int>{4});
  }
  SECTION("ties break by layer then unit") {
    auto cap = fake_capture({2, 2}, {4, 4});
    PruneConfig cfg;
    auto plan = amg::build_plan_count(
        cap, cfg, UnitKind::kToken, 2,
        {score(UnitKind::kToken, 0, 1, 0.5), score(UnitKind::kToken, 0, 2, 0.5),
         score(UnitKind::kToken, 0, 3, 0.5), score(UnitKind::kToken, 1, 1, 0.5),
         score(UnitKind::kToken, 1, 2, 0.5), score(UnitKind::kToken, 1, 3, 0.5)});
    REQUIRE(plan.selected.size() == 2);
    REQUIRE(plan.selected[0].layer == 0);
    REQUIRE(plan.selected[0].unit_id == 1);
    REQUIRE(plan.selected[1].layer == 0);
    REQUIRE(plan.selected[1].unit_id == 2);
  }
  SECTION("floor skip and replace") {
    // Layer 0 may lose at most two of {1,2,3}; the third-lowest is skipped
    // and layer 1 supplies the replacement.
    auto cap = fake_capture({2, 2}, {4, 4});
    PruneConfig cfg;
    auto plan = amg::build_plan_count(
        cap, cfg, UnitKind::kToken, 3,
        {score(UnitKind::kToken, 0, 1, 0.1), score(UnitKind::kToken, 0, 2, 0.2),
         score(UnitKind::kToken, 0, 3, 0.3), score(UnitKind::kToken, 1, 1, 0.9),
         score(UnitKind::kToken, 1, 2, 1.0), score(UnitKind::kToken, 1, 3, 1.1)});
    REQUIRE(plan.selected.size() == 3);
    REQUIRE(plan.selected[0].unit_id == 1);
    REQUIRE(plan.selected[1].unit_id == 2);
    REQUIRE(plan.selected[2].layer == 1);
    REQUIRE(plan.selected[2].unit_id == 1);
    REQUIRE(plan.skips.size() == 1);
    REQUIRE(plan.skips[0].layer == 0);
    REQUIRE(plan.skips[0].unit_id == 3);
    REQUIRE(plan.resulting_units == std::vector<int>{2, 3});
  }
  SECTION("infeasible target lists binding layers") {
    auto cap = fake_capture({2, 2}, {4, 2});
    PruneConfig cfg;
    std::vector<ImportanceScore> scores = {
        score(UnitKind::kToken, 0, 1, 0.1), score(UnitKind::kToken, 0, 2, 0.2),
        score(UnitKind::kToken, 0, 3, 0.3), score(UnitKind::kToken, 1, 1, 0.9)};
    // Layer 1 already sits at its floor of two kv tokens, layer 0 can lose
    // two: a target of four is unsatisfiable.
    try {
      amg::build_plan_count(cap, cfg, UnitKind::kToken, 4, scores);
      FAIL("expected InfeasiblePlanError");
    } catch (const amg::InfeasiblePlanError& e) {
      REQUIRE(e.binding_layers == std::vector<int>{0, 1});
    }
  }
}

TEST_CASE("plan properties", "[prune]") {
  SECTION("lambda zero is invariant to layer relabeling") {
    auto cap = fake_capture({2, 2, 2}, {6, 6, 6});
    PruneConfig cfg;
    std::vector<double> raws = {0.11, 0.52, 0.23, 0.74, 0.35, 0.96};
    std::vector<ImportanceScore> scores;
    int i = 0;
    for (int l = 0; l < 3; ++l) {
      for (int t = 1; t <= 2; ++t) scores.push_back(score(UnitKind::kToken, l, t, raws[i++]));
    }
    // Send layer l to layer (l+1) mod 3 and rebuild.
    std::vector<ImportanceScore> relabeled;
    for (const auto& s : scores) {
      auto r = s;
      r.layer = (s.layer + 1) % 3;
      relabeled.push_back(r);
    }
    auto a = amg::build_plan_count(cap, cfg, UnitKind::kToken, 3, scores);
    auto b = amg::build_plan_count(cap, cfg, UnitKind::kToken, 3, relabeled);
    std::vector<double> ra, rb;
    for (const auto& s : a.selected) ra.push_back(s.raw);
    for (const auto& s : b.selected) rb.push_back(s.raw);
    REQUIRE(ra == rb);
  }
  SECTION("deep-layer pressure is monotone in lambda") {
    auto cap = fake_capture({2, 2, 2}, {8, 8, 8});
    std::vector<ImportanceScore> scores;
    // Importances rise with depth, so plain sorting favors shallow layers
    // and lambda pushes selection deeper.
    const double raws[3][6] = {{0.30, 0.42, 0.54, 0.66, 0.78, 0.90},
                               {0.35, 0.47, 0.59, 0.71, 0.83, 0.95},
                               {0.40, 0.52, 0.64, 0.76, 0.88, 1.00}};
    for (int l = 0; l < 3; ++l) {
      for (int t = 1; t <= 6; ++t) scores.push_back(score(UnitKind::kToken, l, t, raws[l][t - 1]));
    }
    int previous = 0;
    for (double lambda : {0.0, 0.1, 0.2, 0.3, 0.4, 0.45}) {
      PruneConfig cfg;
      cfg.lambda = lambda;
      auto plan = amg::build_plan_count(cap, cfg, UnitKind::kToken, 6, scores);
      int deepest = 0;
      for (const auto& s : plan.selected) {
        if (s.layer == 2) ++deepest;
      }
      REQUIRE(deepest >= previous);
      previous = deepest;
    }
    REQUIRE(previous > 0);
  }
  SECTION("protected units are never selected") {
    auto cap = fake_capture({3}, {5});
    PruneConfig cfg;
    cfg.protect.push_back({UnitKind::kToken, 0, 2});
    auto plan = amg::build_plan_count(cap, cfg, UnitKind::kToken, 2,
                                      {score(UnitKind::kToken, 0, 1, 0.4),
                                       score(UnitKind::kToken, 0, 2, 0.1),
                                       score(UnitKind::kToken, 0, 3, 0.3),
                                       score(UnitKind::kToken, 0, 4, 0.2)});
    REQUIRE(plan.selected.size() == 2);
    REQUIRE(plan.selected[0].unit_id == 4);
    REQUIRE(plan.selected[1].unit_id == 3);
  }
}

TEST_CASE("iterative head execution", "[prune]") {
  ModelSpec spec = ten_head_spec();
  auto batches = calib(spec);

  SECTION("one iteration equals a single plan plus surgery") {
    VitModel a = VitModel::init(spec, 31);
    VitModel b = VitModel::init(spec, 31);
    PruneConfig cfg;
    cfg.head_rate = 0.3;
    cfg.head_iterations = 1;
    auto report = amg::execute_head_plan(a, batches, cfg);

    auto cap = amg::calibrate(b, batches, false);
    auto plan = amg::build_plan(cap, cfg, UnitKind::kHead, amg::head_scores(cap));
    for (const auto& [layer, slots] : plan.by_layer()) amg::remove_heads(b, layer, slots);

    REQUIRE(report.steps.size() == 1);
    REQUIRE(amg::serialize_checkpoint(a) == amg::serialize_checkpoint(b));
  }
  SECTION("forty percent of ten heads in two iterations removes two then two") {
    VitModel model = VitModel::init(spec, 32);
    PruneConfig cfg;
    cfg.head_rate = 0.4;
    cfg.head_iterations = 2;
    auto report = amg::execute_head_plan(model, batches, cfg);
    REQUIRE(report.target == 4);
    REQUIRE(report.steps.size() == 2);
    REQUIRE(report.steps[0].selected.size() == 2);
    REQUIRE(report.steps[1].selected.size() == 2);
    REQUIRE(model.spec.heads(0) + model.spec.heads(1) == 6);
    REQUIRE(report.heads_after == model.spec.heads_per_layer);
  }
  SECTION("ceil-first split puts the remainder early") {
    VitModel model = VitModel::init(spec, 33);
    PruneConfig cfg;
    cfg.head_rate = 0.5;
    cfg.head_iterations = 4;
    auto report = amg::execute_head_plan(model, batches, cfg);
    REQUIRE(report.target == 5);
    REQUIRE(report.steps.size() == 4);
    REQUIRE(report.steps[0].selected.size() == 2);
    REQUIRE(report.steps[1].selected.size() == 1);
    REQUIRE(report.steps[2].selected.size() == 1);
    REQUIRE(report.steps[3].selected.size() == 1);
  }
  SECTION("re-scoring between steps sees the pruned structure") {
    VitModel model = VitModel::init(spec, 34);
    PruneConfig cfg;
    cfg.head_rate = 0.4;
    cfg.head_iterations = 2;
    auto report = amg::execute_head_plan(model, batches, cfg);
    int after_first = 0;
    for (int n : report.steps[0].resulting_units) after_first += n;
    REQUIRE(after_first == 8);
    int after_second = 0;
    for (int n : report.steps[1].resulting_units) after_second += n;
    REQUIRE(after_second == 6);
    // Step-two slot ids must be valid for the shrunken layers.
    for (const auto& s : report.steps[1].selected) {
      REQUIRE(s.unit_id < report.steps[0].resulting_units[static_cast<std::size_t>(s.layer)]);
    }
  }
  SECTION("cost model confirms the parameter cut") {
    VitModel model = VitModel::init(spec, 35);
    PruneConfig cfg;
    cfg.head_rate = 0.4;
    auto report = amg::execute_head_plan(model, batches, cfg);
    const long long removed = 4;
    const long long per_head = 4LL * spec.embed_dim * spec.head_dim;
    REQUIRE(report.cost_before.msa_params_total - report.cost_after.msa_params_total ==
            removed * per_head);
    auto fresh = amg::analytical_cost(model.spec);
    REQUIRE(fresh.msa_params_total == report.cost_after.msa_params_total);
  }
  SECTION("infeasible rate leaves the model untouched") {
    VitModel model = VitModel::init(spec, 36);
    auto before = amg::serialize_checkpoint(model);
    PruneConfig cfg;
    cfg.head_rate = 0.9;
    REQUIRE_THROWS_AS(amg::execute_head_plan(model, batches, cfg), amg::InfeasiblePlanError);
    REQUIRE(amg::serialize_checkpoint(model) == before);
  }
  SECTION("between-steps hook runs between iterations only") {
    VitModel model = VitModel::init(spec, 37);
    PruneConfig cfg;
    cfg.head_rate = 0.4;
    cfg.head_iterations = 4;
    int calls = 0;
    amg::execute_head_plan(model, batches, cfg, amg::EntropySource::kAveragedMap,
                           [&calls](VitModel&, int) { ++calls; });
    REQUIRE(calls == 3);
  }
  SECTION("zero rate performs no calibration or surgery") {
    VitModel model = VitModel::init(spec, 38);
    auto before = amg::serialize_checkpoint(model);
    PruneConfig cfg;
    auto report = amg::execute_head_plan(model, batches, cfg);
    REQUIRE(report.target == 0);
    REQUIRE(report.steps.empty());
    REQUIRE(amg::serialize_checkpoint(model) == before);
  }
}

TEST_CASE("single-shot token execution", "[prune]") {
  ModelSpec spec = toy_spec();
  auto batches = calib(spec);

  SECTION("rate zero leaves logits bitwise unchanged") {
    VitModel model = VitModel::init(spec, 41);
    SyntheticDataset ds(data_for(spec));
    Batch probe = ds.make_batch(1, {0, 1});
    amg::Tape::Pause pause;
    amg::Tensor before = model.forward(probe.images);
    PruneConfig cfg;
    auto report = amg::execute_token_plan(model, batches, cfg);
    amg::Tensor after = model.forward(probe.images);
    REQUIRE(report.target == 0);
    REQUIRE(report.steps.empty());
    REQUIRE(before.data() == after.data());
  }
  SECTION("quarter rate on the toy model") {
    VitModel model = VitModel::init(spec, 42);
    PruneConfig cfg;
    cfg.token_rate = 0.25;
    auto report = amg::execute_token_plan(model, batches, cfg);
    // 4 layers x 17 kv tokens = 68; a quarter is 17 removals.
    REQUIRE(report.target == 17);
    REQUIRE(report.steps.size() == 1);
    REQUIRE(report.steps[0].selected.size() == 17);
    int retained = 0;
    for (int l = 0; l < 4; ++l) {
      const int kv = model.spec.kv_count(l);
      REQUIRE(kv >= 2);
      REQUIRE(model.spec.retained_kv_indices[static_cast<std::size_t>(l)].front() == 0);
      retained += kv;
    }
    REQUIRE(retained == 51);
    REQUIRE(report.kv_after == std::vector<int>{model.spec.kv_count(0), model.spec.kv_count(1),
                                                model.spec.kv_count(2), model.spec.kv_count(3)});
    REQUIRE(report.steps[0].resulting_units == report.kv_after);
    for (const auto& s : report.steps[0].selected) {
      REQUIRE(s.kind == UnitKind::kToken);
      REQUIRE(s.unit_id >= 1);
    }
  }
  SECTION("execution is deterministic") {
    VitModel a = VitModel::init(spec, 43);
    VitModel b = VitModel::init(spec, 43);
    PruneConfig cfg;
    cfg.token_rate = 0.25;
    cfg.lambda = 0.05;
    amg::execute_token_plan(a, batches, cfg);
    amg::execute_token_plan(b, batches, cfg);
    REQUIRE(amg::serialize_checkpoint(a) == amg::serialize_checkpoint(b));
  }
  SECTION("taylor criterion drives a different valid plan") {
    VitModel a = VitModel::init(spec, 44);
    VitModel b = VitModel::init(spec, 44);
    PruneConfig cfg;
    cfg.token_rate = 0.25;
    auto ra = amg::execute_token_plan(a, batches, cfg);
    auto rb = amg::execute_token_plan(b, batches, cfg, amg::TokenCriterion::kTaylor);
    REQUIRE(ra.steps[0].selected.size() == rb.steps[0].selected.size());
    int sum_a = 0, sum_b = 0;
    for (int n : ra.kv_after) sum_a += n;
    for (int n : rb.kv_after) sum_b += n;
    REQUIRE(sum_a == sum_b);
  }
}

TEST_CASE("combined pruning matches the cost-model ratio", "[prune]") {
  ModelSpec spec = toy_spec();
  auto batches = calib(spec);

  SyntheticDataset ds(data_for(spec));
  amg::Tensor sample = ds.make_batch(0, {0}).images;
  auto attention_macs = [&](const VitModel& m) {
    auto cost = amg::instrumented_cost(m, sample);
    long long total = 0;
    for (const auto& l : cost.layers) total += l.attention_macs;
    return total;
  };

  SECTION("global engine totals") {
    VitModel model = VitModel::init(spec, 45);
    PruneConfig cfg;
    cfg.head_rate = 0.25;
    cfg.token_rate = 0.25;
    auto heads = amg::execute_head_plan(model, batches, cfg);
    auto tokens = amg::execute_token_plan(model, batches, cfg);
    REQUIRE(heads.target == 4);
    REQUIRE(tokens.target == 17);
    int total_heads = 0, total_kv = 0;
    for (int l = 0; l < 4; ++l) {
      total_heads += model.spec.heads(l);
      total_kv += model.spec.kv_count(l);
    }
    REQUIRE(total_heads == 12);
    REQUIRE(total_kv == 51);

    long long expected_attn = 0;
    for (int l = 0; l < 4; ++l) {
      expected_attn += 2LL * 17 * model.spec.kv_count(l) * model.spec.heads(l) * 8;
    }
    REQUIRE(attention_macs(model) == expected_attn);
  }
  SECTION("uniform quarter cuts give the exact eta-squared attention ratio") {
    VitModel model = VitModel::init(spec, 46);
    const long long base_attn = attention_macs(model);
    // One head out of four per layer: a uniform 25% head cut.
    auto cap = amg::calibrate(model, batches, false);
    for (int l = 0; l < 4; ++l) {
      int worst = 0;
      for (int h = 1; h < 4; ++h) {
        if (amg::head_entropy(cap, l, h) > amg::head_entropy(cap, l, worst)) worst = h;
      }
      amg::remove_heads(model, l, {worst});
    }
    PruneConfig cfg;
    cfg.token_rate = 0.25;
    amg::execute_token_plan(model, batches, cfg);

    // Kv tokens drop to 51 of 68 in total while every layer keeps 3 of 4
    // heads, so attention MACs scale by exactly (3/4)^2.
    const long long pruned_attn = attention_macs(model);
    REQUIRE(pruned_attn * 16 == base_attn * 9);
  }
}
