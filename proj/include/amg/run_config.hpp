#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "amg/checkpoint.hpp"
#include "amg/criteria.hpp"
#include "amg/dataset.hpp"
#include "amg/errors.hpp"
#include "amg/model_spec.hpp"
#include "amg/prune.hpp"
#include "amg/train.hpp"

namespace amg {

// Flat key=value run configuration. Values stay strings until a typed
// accessor parses them, so command-line overrides keep their exact spelling
// and the canonical text hashes the same bytes the user wrote.
class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig from_text(const std::string& text, const std::string& name) {
    RunConfig cfg;
    cfg.name_ = name;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": expected key = value, got '" +
                          trimmed + "'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": empty key");
      }
      if (cfg.values_.count(key) != 0) {
        throw ConfigError(name + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      cfg.values_[key] = {value, lineno};
    }
    return cfg;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str(), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = {value, 0}; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& name() const { return name_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second.text;
  }

  int get_int(const std::string& key, int fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    int out = 0;
    const auto& s = it->second.text;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw ConfigError(anchor(key) + "key '" + key + "' expects an integer, got '" + s + "'");
    }
    return out;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    double out = 0.0;
    const auto& s = it->second.text;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw ConfigError(anchor(key) + "key '" + key + "' expects a number, got '" + s + "'");
    }
    return out;
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed", 1)); }

  // Sorted key = value lines; the identity of a run for hashing purposes.
  std::string canonical_text() const {
    std::string out;
    for (const auto& [key, entry] : values_) {
      out += key;
      out += " = ";
      out += entry.text;
      out += "\n";
    }
    return out;
  }

  std::string hash8() const { return hash_hex(fnv1a64(canonical_text())).substr(0, 8); }

  ModelSpec model_spec() const {
    ModelSpec spec = ModelSpec::uniform(
        get_int("model.image_size", 16), get_int("model.patch_size", 4), get_int("model.dim", 32),
        get_int("model.layers", 4), get_int("model.heads", 4), get_int("model.head_dim", 8),
        get_int("model.classes", 4), get_double("model.mlp_ratio", 2.0), get_int("model.channels", 1));
    spec.validate();
    return spec;
  }

  DatasetConfig dataset_config() const {
    const ModelSpec spec = model_spec();
    DatasetConfig cfg;
    cfg.image_size = spec.image_size;
    cfg.channels = spec.channels;
    cfg.num_classes = spec.num_classes;
    cfg.train_size = get_int("data.train_size", 64);
    cfg.val_size = get_int("data.val_size", 32);
    cfg.cell_size = get_int("data.cell_size", 4);
    cfg.noise = get_double("data.noise", 0.25);
    cfg.seed = static_cast<std::uint64_t>(get_int("data.seed", static_cast<int>(seed())));
    return cfg;
  }

  TrainConfig train_config() const {
    TrainConfig cfg;
    cfg.epochs = get_int("train.epochs", 30);
    cfg.batch_size = get_int("train.batch_size", 8);
    cfg.learning_rate = get_double("train.learning_rate", 0.1);
    cfg.weight_decay = get_double("train.weight_decay", 1e-3);
    cfg.alpha = get_double("train.alpha", 0.5);
    cfg.seed = seed();
    cfg.validate();
    return cfg;
  }

  PruneConfig prune_config() const {
    PruneConfig cfg;
    cfg.head_rate = get_double("prune.head_rate", 0.0);
    cfg.token_rate = get_double("prune.token_rate", 0.0);
    cfg.lambda = get_double("prune.lambda", 0.0);
    cfg.head_iterations = get_int("prune.iterations", 4);
    return cfg;
  }

  EntropySource entropy_source() const {
    const std::string s = get_string("prune.entropy_source", "averaged");
    if (s == "averaged") return EntropySource::kAveragedMap;
    if (s == "per_sample") return EntropySource::kMeanPerSample;
    throw ConfigError(anchor("prune.entropy_source") +
                      "prune.entropy_source must be averaged or per_sample, got '" + s + "'");
  }

  // Gradient-attention scoring is the default; taylor switches the
  // token criterion to the magnitude baseline.
  TokenCriterion token_criterion() const {
    const std::string s = get_string("prune.criterion", "entropy");
    if (s == "entropy") return TokenCriterion::kGradientAttention;
    if (s == "taylor") return TokenCriterion::kTaylor;
    throw ConfigError(anchor("prune.criterion") + "prune.criterion must be entropy or taylor, got '" +
                      s + "'");
  }

 private:
  struct Entry {
    std::string text;
    int line = 0;
  };

  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  std::string anchor(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end() || it->second.line == 0) return name_ + ": ";
    return name_ + ":" + std::to_string(it->second.line) + ": ";
  }

  std::map<std::string, Entry> values_;
  std::string name_ = "config";
};

}  // namespace amg
