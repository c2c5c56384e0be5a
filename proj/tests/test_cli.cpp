#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/checkpoint.hpp"
#include "amg/dataset.hpp"
#include "amg/io_csv.hpp"
#include "amg/vit.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(AMG_CLI_PATH) + " " + args;
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

const char* kTinyConfig =
    "model.image_size = 8\n"
    "model.patch_size = 4\n"
    "model.dim = 8\n"
    "model.layers = 2\n"
    "model.heads = 2\n"
    "model.head_dim = 4\n"
    "model.classes = 3\n"
    "data.train_size = 12\n"
    "data.val_size = 6\n"
    "data.seed = 7\n"
    "train.epochs = 6\n"
    "train.batch_size = 4\n"
    "train.learning_rate = 0.1\n"
    "seed = 5\n";

// Fresh scratch directory with the tiny config written into it.
fs::path scratch(const std::string& name) {
  fs::path dir = fs::path("cli_scratch") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  amg::write_text_file((dir / "tiny.cfg").string(), kTinyConfig);
  return dir;
}

fs::path find_one(const fs::path& root, const std::string& filename) {
  std::vector<fs::path> hits;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.path().filename() == filename) hits.push_back(entry.path());
  }
  REQUIRE(hits.size() == 1);
  return hits.front();
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

fs::path train_baseline(const fs::path& dir, const std::string& extra = "") {
  const int rc = run_cli("train --config " + quoted(dir / "tiny.cfg") + " --out-dir " +
                         quoted(dir / "runs") + extra + " > " + quoted(dir / "train.out") + " 2>&1");
  REQUIRE(rc == 0);
  return find_one(dir / "runs", "baseline.ckpt");
}

}  // namespace

TEST_CASE("missing config file exits with the usage code and names the path", "[cli]") {
  const fs::path dir = scratch("missing");
  const fs::path err = dir / "err.txt";
  const int rc = run_cli("train --config " + quoted(dir / "nope.cfg") + " 2> " + quoted(err));
  REQUIRE(rc == 2);
  const std::string text = amg::read_file_bytes(err.string());
  REQUIRE(text.find("nope.cfg") != std::string::npos);
}

TEST_CASE("bad flag values exit with the usage code", "[cli]") {
  const fs::path dir = scratch("badflag");
  const fs::path ckpt = train_baseline(dir);
  REQUIRE(run_cli("prune " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                  " --criterion bogus 2> " + quoted(dir / "err.txt")) == 2);
  REQUIRE(run_cli("prune 2> " + quoted(dir / "err2.txt")) == 2);
}

TEST_CASE("trained checkpoint reloads to identical logits", "[cli]") {
  const fs::path dir = scratch("roundtrip");
  const fs::path ckpt = train_baseline(dir);

  amg::VitModel model = amg::load_checkpoint(ckpt.string());
  amg::DatasetConfig dc;
  dc.image_size = 8;
  dc.channels = 1;
  dc.num_classes = 3;
  dc.train_size = 12;
  dc.val_size = 6;
  dc.seed = 7;
  amg::SyntheticDataset ds(dc);
  const amg::Batch probe = ds.make_batch(1, {0, 1, 2});

  amg::Tape::Pause pause;
  const amg::Tensor first = model.forward(probe.images);
  const fs::path copy = dir / "copy.ckpt";
  amg::save_checkpoint(model, copy.string());
  amg::VitModel reloaded = amg::load_checkpoint(copy.string());
  const amg::Tensor second = reloaded.forward(probe.images);
  REQUIRE(first.shape() == second.shape());
  REQUIRE(first.data() == second.data());
}

TEST_CASE("manifests list every artifact with its content hash", "[cli]") {
  const fs::path dir = scratch("manifest");
  train_baseline(dir);
  const fs::path manifest = find_one(dir / "runs", "manifest_train.json");
  const auto j = nlohmann::json::parse(amg::read_file_bytes(manifest.string()));
  REQUIRE(j.at("format") == "amg-manifest-1");
  REQUIRE(j.at("outputs").size() == 2);
  for (const auto& [name, hash] : j.at("outputs").items()) {
    const fs::path artifact = manifest.parent_path() / name;
    REQUIRE(fs::exists(artifact));
    REQUIRE(hash.get<std::string>() == amg::hash_hex(amg::file_content_hash(artifact.string())));
  }
  REQUIRE(j.contains("timestamp"));
}

TEST_CASE("identical seeds reproduce byte-identical artifacts", "[cli]") {
  const fs::path dir = scratch("determinism");
  const fs::path a = train_baseline(dir, " --seed 7");
  fs::rename(dir / "runs", dir / "runs_a");
  const fs::path b = train_baseline(dir, " --seed 7");
  fs::rename(dir / "runs", dir / "runs_b");
  const fs::path a2 = dir / "runs_a" / a.parent_path().filename() / "baseline.ckpt";
  const fs::path b2 = dir / "runs_b" / b.parent_path().filename() / "baseline.ckpt";
  REQUIRE(amg::file_content_hash(a2.string()) == amg::file_content_hash(b2.string()));
  REQUIRE(amg::read_file_bytes((a2.parent_path() / "train_log.jsonl").string()) ==
          amg::read_file_bytes((b2.parent_path() / "train_log.jsonl").string()));

  const fs::path c = train_baseline(dir, " --seed 8");
  REQUIRE(amg::file_content_hash(c.string()) != amg::file_content_hash(a2.string()));
}

TEST_CASE("zero rates pass the checkpoint through bit for bit", "[cli]") {
  const fs::path dir = scratch("zerorate");
  const fs::path ckpt = train_baseline(dir);
  REQUIRE(run_cli("prune " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                  " --out-dir " + quoted(dir / "runs") + " --head-rate 0 --token-rate 0 > " +
                  quoted(dir / "prune.out") + " 2>&1") == 0);
  const fs::path pruned = find_one(dir / "runs", "pruned.ckpt");
  REQUIRE(amg::read_file_bytes(ckpt.string()) == amg::read_file_bytes(pruned.string()));
}

TEST_CASE("layer weighting shifts token removal toward deep layers", "[cli]") {
  const fs::path dir = scratch("lambda");
  const fs::path ckpt = train_baseline(dir);
  auto removed_per_layer = [&](const std::string& lambda, const std::string& tag) {
    REQUIRE(run_cli("prune " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                    " --out-dir " + quoted(dir / ("runs_" + tag)) +
                    " --token-rate 0.25 --lambda " + lambda + " > " +
                    quoted(dir / ("prune_" + tag + ".out")) + " 2>&1") == 0);
    const fs::path report = find_one(dir / ("runs_" + tag), "prune_report.json");
    const auto j = nlohmann::json::parse(amg::read_file_bytes(report.string()));
    const auto& structure = j.at("token").at("structure");
    const auto before = structure.at("kv_before").get<std::vector<int>>();
    const auto after = structure.at("kv_after").get<std::vector<int>>();
    std::vector<int> removed;
    for (std::size_t l = 0; l < before.size(); ++l) removed.push_back(before[l] - after[l]);
    return removed;
  };
  const std::vector<int> flat = removed_per_layer("0", "flat");
  const std::vector<int> deep = removed_per_layer("0.05", "deep");
  REQUIRE(flat.size() == 2);
  REQUIRE(deep.size() == 2);
  REQUIRE(deep.back() >= flat.back());
}

TEST_CASE("infeasible rates exit with the planning code", "[cli]") {
  const fs::path dir = scratch("infeasible");
  const fs::path ckpt = train_baseline(dir);
  const fs::path err = dir / "err.txt";
  REQUIRE(run_cli("prune " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                  " --out-dir " + quoted(dir / "runs") + " --head-rate 0.9 2> " + quoted(err)) == 3);
  const std::string text = amg::read_file_bytes(err.string());
  REQUIRE(text.find("binding layers") != std::string::npos);
}

TEST_CASE("the full pipeline reruns byte for byte", "[cli]") {
  const fs::path dir = scratch("pipeline");
  const fs::path ckpt = train_baseline(dir);
  auto pipeline = [&](const std::string& tag) {
    const fs::path out = dir / ("runs_" + tag);
    REQUIRE(run_cli("prune " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                    " --out-dir " + quoted(out) + " --head-rate 0.25 --token-rate 0.2 > " +
                    quoted(dir / ("prune_" + tag + ".out")) + " 2>&1") == 0);
    const fs::path pruned = find_one(out, "pruned.ckpt");
    REQUIRE(run_cli("finetune " + quoted(pruned) + " --config " + quoted(dir / "tiny.cfg") +
                    " --teacher " + quoted(ckpt) + " --out-dir " + quoted(out) + " > " +
                    quoted(dir / ("finetune_" + tag + ".out")) + " 2>&1") == 0);
    REQUIRE(run_cli("report " + quoted(find_one(out, "finetuned.ckpt")) + " --config " +
                    quoted(dir / "tiny.cfg") + " --out-dir " + quoted(out) + " > " +
                    quoted(dir / ("report_" + tag + ".out")) + " 2>&1") == 0);
    return out;
  };
  const fs::path a = pipeline("a");
  const fs::path b = pipeline("b");
  for (const std::string name : {"pruned.ckpt", "prune_report.json", "finetuned.ckpt"}) {
    REQUIRE(amg::read_file_bytes(find_one(a, name).string()) ==
            amg::read_file_bytes(find_one(b, name).string()));
  }
  // One cost export per finetuned checkpoint; identical inputs, identical bytes.
  std::vector<fs::path> costs_a, costs_b;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().filename().string().rfind("cost-", 0) == 0 &&
        e.path().extension() == ".json") {
      costs_a.push_back(e.path());
    }
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.path().filename().string().rfind("cost-", 0) == 0 &&
        e.path().extension() == ".json") {
      costs_b.push_back(e.path());
    }
  }
  REQUIRE(costs_a.size() == 1);
  REQUIRE(costs_b.size() == 1);
  REQUIRE(costs_a.front().filename() == costs_b.front().filename());
  REQUIRE(amg::read_file_bytes(costs_a.front().string()) ==
          amg::read_file_bytes(costs_b.front().string()));
}

TEST_CASE("score and heatmap exports parse as csv", "[cli]") {
  const fs::path dir = scratch("exports");
  const fs::path ckpt = train_baseline(dir);
  REQUIRE(run_cli("calibrate " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                  " --out-dir " + quoted(dir / "runs") + " > " + quoted(dir / "cal.out") +
                  " 2>&1") == 0);
  REQUIRE(run_cli("export-attn " + quoted(ckpt) + " --config " + quoted(dir / "tiny.cfg") +
                  " --out-dir " + quoted(dir / "runs") + " > " + quoted(dir / "attn.out") +
                  " 2>&1") == 0);

  fs::path scores, heatmap;
  for (const auto& e : fs::recursive_directory_iterator(dir / "runs")) {
    const std::string name = e.path().filename().string();
    if (name.rfind("scores-", 0) == 0) scores = e.path();
    if (name.rfind("attn-", 0) == 0) heatmap = e.path();
  }
  REQUIRE_FALSE(scores.empty());
  REQUIRE_FALSE(heatmap.empty());

  const std::string score_text = amg::read_file_bytes(scores.string());
  REQUIRE(score_text.rfind("kind,layer,unit,raw,weighted\n", 0) == 0);
  // 2 layers x 2 heads plus 2 layers x 4 prunable tokens.
  REQUIRE(std::count(score_text.begin(), score_text.end(), '\n') == 1 + 4 + 8);

  const std::string heat_text = amg::read_file_bytes(heatmap.string());
  REQUIRE(heat_text.rfind("layer,head,row,col,value\n", 0) == 0);
  // 2 layers x 2 heads x 5 rows x 5 cols.
  REQUIRE(std::count(heat_text.begin(), heat_text.end(), '\n') == 1 + 100);
}
