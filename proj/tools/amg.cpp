#include <CLI11.hpp>

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/checkpoint.hpp"
#include "amg/cost_model.hpp"
#include "amg/criteria.hpp"
#include "amg/dataset.hpp"
#include "amg/io_csv.hpp"
#include "amg/prune.hpp"
#include "amg/run_config.hpp"
#include "amg/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

fs::path ensure_run_dir(const amg::RunConfig& cfg, const std::string& out_dir) {
  fs::path dir = fs::path(out_dir) / ("run-" + std::to_string(cfg.seed()) + "-" + cfg.hash8());
  fs::create_directories(dir);
  return dir;
}

// Every artifact a command writes is listed with its content hash; the wall
// clock lives in its own field so reruns differ nowhere else.
void write_manifest(const fs::path& dir, const std::string& command, const amg::RunConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<fs::path>& outputs) {
  nlohmann::json j;
  j["format"] = "amg-manifest-1";
  j["tool_version"] = kToolVersion;
  j["command"] = command;
  j["seed"] = cfg.seed();
  j["config_text"] = cfg.canonical_text();
  nlohmann::json in = nlohmann::json::object();
  for (const auto& [role, path] : inputs) {
    in[role] = {{"path", path}, {"hash", amg::hash_hex(amg::file_content_hash(path))}};
  }
  j["inputs"] = in;
  nlohmann::json out = nlohmann::json::object();
  for (const auto& path : outputs) {
    out[path.filename().string()] = amg::hash_hex(amg::file_content_hash(path.string()));
  }
  j["outputs"] = out;
  j["timestamp"] = iso_timestamp();
  amg::write_text_file((dir / ("manifest_" + command + ".json")).string(), j.dump(2) + "\n");
}

// The checkpoint is authoritative for data geometry; the config only chooses
// split sizes, noise and seed.
amg::DatasetConfig data_for(const amg::RunConfig& cfg, const amg::ModelSpec& spec) {
  amg::DatasetConfig d = cfg.dataset_config();
  d.image_size = spec.image_size;
  d.channels = spec.channels;
  d.num_classes = spec.num_classes;
  return d;
}

amg::Tensor probe_image(const amg::SyntheticDataset& ds, const amg::DatasetConfig& dc) {
  return ds.make_batch(dc.val_size > 0 ? 1 : 0, {0}).images;
}

// Read-only commands tag their artifacts with the checkpoint they describe,
// so looking at several checkpoints under one config never clobbers.
std::string ckpt_tag(const std::string& path) {
  return amg::hash_hex(amg::file_content_hash(path)).substr(0, 8);
}

void announce(const fs::path& path) { std::printf("wrote %s\n", path.string().c_str()); }

int cmd_train(const amg::RunConfig& cfg, const std::string& cfg_path, const std::string& out_dir) {
  const amg::ModelSpec spec = cfg.model_spec();
  amg::SyntheticDataset ds(cfg.dataset_config());
  amg::VitModel model = amg::VitModel::init(spec, cfg.seed());
  amg::TrainConfig tc = cfg.train_config();
  tc.alpha = 0.0;  // baseline training has no teacher
  const amg::TrainLog log = amg::train(model, ds, tc);

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const fs::path ckpt = dir / "baseline.ckpt";
  const fs::path log_path = dir / "train_log.jsonl";
  amg::save_checkpoint(model, ckpt.string());
  amg::write_text_file(log_path.string(), log.to_jsonl());
  std::vector<std::pair<std::string, std::string>> inputs;
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "train", cfg, inputs, {ckpt, log_path});

  if (!log.epochs.empty()) {
    const auto& last = log.epochs.back();
    std::printf("epoch %d  loss %.6f  train_acc %.4f  val_acc %.4f\n", last.epoch, last.loss,
                last.train_accuracy, last.val_accuracy);
  }
  announce(ckpt);
  announce(log_path);
  return 0;
}

int cmd_calibrate(const amg::RunConfig& cfg, const std::string& cfg_path, const std::string& out_dir,
                  const std::string& ckpt_path) {
  amg::VitModel model = amg::load_checkpoint(ckpt_path);
  amg::SyntheticDataset ds(data_for(cfg, model.spec));
  const auto batches = ds.train_batches(cfg.train_config().batch_size);
  const amg::AttentionCapture cap = amg::calibrate(model, batches, true);

  const double lambda = cfg.prune_config().lambda;
  auto heads = amg::weight_scores(amg::head_scores(cap, cfg.entropy_source()), lambda);
  const auto tokens =
      amg::weight_scores(amg::token_scores(cap, cfg.token_criterion()), lambda);
  heads.insert(heads.end(), tokens.begin(), tokens.end());

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const std::string tag = ckpt_tag(ckpt_path);
  const fs::path scores_path = dir / ("scores-" + tag + ".csv");
  amg::write_text_file(scores_path.string(), amg::scores_csv(heads));
  std::vector<std::pair<std::string, std::string>> inputs = {{"checkpoint", ckpt_path}};
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "calibrate-" + tag, cfg, inputs, {scores_path});

  const auto entropy = amg::mean_entropy_per_layer(cap);
  for (std::size_t l = 0; l < entropy.size(); ++l) {
    std::printf("layer %zu  mean head entropy %.6f\n", l, entropy[l]);
  }
  announce(scores_path);
  return 0;
}

int cmd_prune(const amg::RunConfig& cfg, const std::string& cfg_path, const std::string& out_dir,
              const std::string& ckpt_path) {
  amg::VitModel model = amg::load_checkpoint(ckpt_path);
  const amg::DatasetConfig dc = data_for(cfg, model.spec);
  amg::SyntheticDataset ds(dc);
  const auto batches = ds.train_batches(cfg.train_config().batch_size);
  const amg::PruneConfig pc = cfg.prune_config();
  pc.validate(model.spec.layers);

  const amg::Tensor probe = probe_image(ds, dc);
  const amg::CostReport before = amg::instrumented_cost(model, probe);
  const amg::PruneReport head_report = amg::execute_head_plan(model, batches, pc, cfg.entropy_source());
  const amg::PruneReport token_report =
      amg::execute_token_plan(model, batches, pc, cfg.token_criterion());
  const amg::CostReport after = amg::instrumented_cost(model, probe);

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const fs::path ckpt = dir / "pruned.ckpt";
  amg::save_checkpoint(model, ckpt.string());
  nlohmann::json report;
  report["format"] = "amg-prune-run-1";
  report["head"] = head_report.to_json();
  report["token"] = token_report.to_json();
  report["cost_before"] = before.to_json();
  report["cost_after"] = after.to_json();
  const fs::path report_path = dir / "prune_report.json";
  const fs::path before_path = dir / "cost_before.json";
  const fs::path after_path = dir / "cost_after.json";
  amg::write_text_file(report_path.string(), report.dump(2) + "\n");
  amg::write_text_file(before_path.string(), before.to_json().dump(2) + "\n");
  amg::write_text_file(after_path.string(), after.to_json().dump(2) + "\n");
  std::vector<std::pair<std::string, std::string>> inputs = {{"checkpoint", ckpt_path}};
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "prune", cfg, inputs, {ckpt, report_path, before_path, after_path});

  int heads_after = 0;
  int heads_before = 0;
  for (const auto& l : before.layers) heads_before += l.heads;
  for (const auto& l : after.layers) heads_after += l.heads;
  std::printf("heads %d -> %d, msa params %lld -> %lld\n", heads_before, heads_after,
              before.msa_params_total, after.msa_params_total);
  announce(ckpt);
  announce(report_path);
  return 0;
}

int cmd_finetune(const amg::RunConfig& cfg, const std::string& cfg_path, const std::string& out_dir,
                 const std::string& ckpt_path, const std::string& teacher_path) {
  amg::VitModel student = amg::load_checkpoint(ckpt_path);
  amg::SyntheticDataset ds(data_for(cfg, student.spec));
  const amg::TrainConfig tc = cfg.train_config();

  amg::TrainLog log;
  if (tc.alpha > 0.0) {
    if (teacher_path.empty()) {
      throw amg::ConfigError("finetune with train.alpha > 0 needs --teacher");
    }
    amg::VitModel teacher = amg::load_checkpoint(teacher_path);
    log = amg::finetune(student, teacher, ds, tc);
  } else {
    log = amg::train(student, ds, tc);
  }

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const fs::path ckpt = dir / "finetuned.ckpt";
  const fs::path log_path = dir / "finetune_log.jsonl";
  amg::save_checkpoint(student, ckpt.string());
  amg::write_text_file(log_path.string(), log.to_jsonl());
  std::vector<std::pair<std::string, std::string>> inputs = {{"checkpoint", ckpt_path}};
  if (!teacher_path.empty()) inputs.emplace_back("teacher", teacher_path);
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "finetune", cfg, inputs, {ckpt, log_path});

  if (!log.epochs.empty()) {
    const auto& last = log.epochs.back();
    std::printf("epoch %d  loss %.6f  train_acc %.4f  val_acc %.4f\n", last.epoch, last.loss,
                last.train_accuracy, last.val_accuracy);
  }
  announce(ckpt);
  announce(log_path);
  return 0;
}

int cmd_report(const amg::RunConfig& cfg, const std::string& cfg_path, const std::string& out_dir,
               const std::string& ckpt_path) {
  amg::VitModel model = amg::load_checkpoint(ckpt_path);
  const amg::DatasetConfig dc = data_for(cfg, model.spec);
  amg::SyntheticDataset ds(dc);
  const amg::CostReport measured = amg::instrumented_cost(model, probe_image(ds, dc));

  std::fputs(measured.table().c_str(), stdout);

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const std::string tag = ckpt_tag(ckpt_path);
  const fs::path json_path = dir / ("cost-" + tag + ".json");
  const fs::path csv_path = dir / ("cost-" + tag + ".csv");
  amg::write_text_file(json_path.string(), measured.to_json().dump(2) + "\n");
  amg::write_text_file(csv_path.string(), amg::cost_csv(measured));
  std::vector<std::pair<std::string, std::string>> inputs = {{"checkpoint", ckpt_path}};
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "report-" + tag, cfg, inputs, {json_path, csv_path});
  announce(json_path);
  announce(csv_path);
  return 0;
}

int cmd_export_attn(const amg::RunConfig& cfg, const std::string& cfg_path,
                    const std::string& out_dir, const std::string& ckpt_path) {
  amg::VitModel model = amg::load_checkpoint(ckpt_path);
  amg::SyntheticDataset ds(data_for(cfg, model.spec));
  const auto batches = ds.train_batches(cfg.train_config().batch_size);
  const amg::AttentionCapture cap = amg::calibrate(model, batches, false);

  const fs::path dir = ensure_run_dir(cfg, out_dir);
  const std::string tag = ckpt_tag(ckpt_path);
  const fs::path heatmap_path = dir / ("attn-" + tag + ".csv");
  amg::write_text_file(heatmap_path.string(), amg::heatmap_csv(cap));
  std::vector<std::pair<std::string, std::string>> inputs = {{"checkpoint", ckpt_path}};
  if (!cfg_path.empty()) inputs.emplace_back("config", cfg_path);
  write_manifest(dir, "export-attn-" + tag, cfg, inputs, {heatmap_path});
  announce(heatmap_path);
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"attention-guided transformer pruning toolkit"};
  app.require_subcommand(1);

  std::string cfg_path;
  std::string out_dir = "runs";
  std::string seed_str;
  std::string head_rate, token_rate, lambda_str, iterations, criterion, teacher_path;
  std::string ckpt_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", cfg_path, "key = value configuration file");
    sub->add_option("--out-dir", out_dir, "root for run directories")->capture_default_str();
    sub->add_option("--seed", seed_str, "run seed (model init and shuffling)");
  };
  auto add_prune_flags = [&](CLI::App* sub) {
    sub->add_option("--head-rate", head_rate, "fraction of heads to remove");
    sub->add_option("--token-rate", token_rate, "fraction of key/value tokens to remove");
    sub->add_option("--lambda", lambda_str, "layer weighting strength");
    sub->add_option("--iterations", iterations, "iterative head pruning steps");
    sub->add_option("--criterion", criterion, "token scoring criterion")
        ->check(CLI::IsMember({"entropy", "taylor"}));
  };
  auto add_checkpoint = [&](CLI::App* sub) {
    sub->add_option("checkpoint", ckpt_path, "input checkpoint")->required();
  };

  CLI::App* train = app.add_subcommand("train", "train a baseline model");
  add_common(train);

  CLI::App* calibrate = app.add_subcommand("calibrate", "score heads and tokens");
  add_common(calibrate);
  add_prune_flags(calibrate);
  add_checkpoint(calibrate);

  CLI::App* prune = app.add_subcommand("prune", "remove heads and key/value tokens");
  add_common(prune);
  add_prune_flags(prune);
  add_checkpoint(prune);

  CLI::App* finetune = app.add_subcommand("finetune", "distill into a pruned model");
  add_common(finetune);
  finetune->add_option("--teacher", teacher_path, "teacher checkpoint for distillation");
  add_checkpoint(finetune);

  CLI::App* report = app.add_subcommand("report", "print and export the cost model");
  add_common(report);
  add_checkpoint(report);

  CLI::App* export_attn = app.add_subcommand("export-attn", "export averaged attention maps");
  add_common(export_attn);
  add_checkpoint(export_attn);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  amg::RunConfig cfg =
      cfg_path.empty() ? amg::RunConfig() : amg::RunConfig::from_file(cfg_path);
  if (!seed_str.empty()) cfg.set("seed", seed_str);
  if (!head_rate.empty()) cfg.set("prune.head_rate", head_rate);
  if (!token_rate.empty()) cfg.set("prune.token_rate", token_rate);
  if (!lambda_str.empty()) cfg.set("prune.lambda", lambda_str);
  if (!iterations.empty()) cfg.set("prune.iterations", iterations);
  if (!criterion.empty()) cfg.set("prune.criterion", criterion);

  if (train->parsed()) return cmd_train(cfg, cfg_path, out_dir);
  if (calibrate->parsed()) return cmd_calibrate(cfg, cfg_path, out_dir, ckpt_path);
  if (prune->parsed()) return cmd_prune(cfg, cfg_path, out_dir, ckpt_path);
  if (finetune->parsed()) return cmd_finetune(cfg, cfg_path, out_dir, ckpt_path, teacher_path);
  if (report->parsed()) return cmd_report(cfg, cfg_path, out_dir, ckpt_path);
  if (export_attn->parsed()) return cmd_export_attn(cfg, cfg_path, out_dir, ckpt_path);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const amg::InfeasiblePlanError& e) {
    std::string layers;
    for (int l : e.binding_layers) {
      if (!layers.empty()) layers += ", ";
      layers += std::to_string(l);
    }
    std::fprintf(stderr, "amg: %s (binding layers: %s)\n", e.what(), layers.c_str());
    return 3;
  } catch (const amg::DivergenceError& e) {
    std::fprintf(stderr, "amg: %s\n", e.what());
    return 4;
  } catch (const amg::NumericError& e) {
    std::fprintf(stderr, "amg: %s\n", e.what());
    return 4;
  } catch (const amg::Error& e) {
    std::fprintf(stderr, "amg: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "amg: unexpected error: %s\n", e.what());
    return 1;
  }
}
