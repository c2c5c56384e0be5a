#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/criteria.hpp"
#include "amg/dataset.hpp"
#include "amg/errors.hpp"
#include "amg/ops.hpp"
#include "amg/rng.hpp"
#include "amg/vit.hpp"

namespace amg {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  double alpha = 0.5;  // distillation weight
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0, got " + std::to_string(epochs));
    if (batch_size < 1) {
      throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
    }
    if (!(learning_rate > 0.0)) {
      throw ConfigError("learning_rate must be > 0, got " + std::to_string(learning_rate));
    }
    if (weight_decay < 0.0) {
      throw ConfigError("weight_decay must be >= 0, got " + std::to_string(weight_decay));
    }
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0, got " + std::to_string(alpha));
  }
};

// Soft distillation: cross-entropy against the labels plus
// alpha times KL(teacher distribution || student distribution). With alpha 0
// the teacher is not consulted at all.
inline Tensor distill_loss(const Tensor& student_logits, const std::vector<int>& labels,
                           const Tensor* teacher_logits, double alpha) {
  Tensor ce = cross_entropy(student_logits, labels);
  if (alpha == 0.0) return ce;
  if (teacher_logits == nullptr) {
    throw ContractError("alpha > 0 needs teacher logits");
  }
  Tensor targets;
  {
    // The teacher distribution is a constant target; nothing propagates back
    // through it.
    Tape::Pause pause;
    targets = softmax_rows(*teacher_logits);
  }
  Tensor kl = kl_divergence(log_softmax_rows(student_logits), targets);
  return add(ce, scale(kl, alpha));
}

// p -= lr * (grad + wd * p), uniformly over every parameter tensor.
inline void sgd_step(std::vector<Tensor>& params, double learning_rate, double weight_decay) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto& data = p.data();
    const auto& grad = p.node->grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] -= learning_rate * (grad[i] + weight_decay * data[i]);
    }
  }
}

inline double evaluate(const VitModel& model, const std::vector<Batch>& batches) {
  Tape::Pause pause;
  long long correct = 0, total = 0;
  for (const auto& batch : batches) {
    Tensor logits = model.forward(batch.images);
    const int C = logits.dim(1);
    for (int b = 0; b < logits.dim(0); ++b) {
      int best = 0;
      for (int c = 1; c < C; ++c) {
        if (logits.at({b, c}) > logits.at({b, best})) best = c;
      }
      correct += best == batch.labels[static_cast<std::size_t>(b)];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> mean_entropy;  // per layer, on the validation split
};

struct TrainLog {
  std::vector<double> initial_entropy;
  std::vector<EpochRecord> epochs;

  std::string to_jsonl() const {
    std::string out;
    nlohmann::json init;
    init["event"] = "init";
    init["mean_entropy"] = initial_entropy;
    out += init.dump() + "\n";
    for (const auto& r : epochs) {
      nlohmann::json j;
      j["event"] = "epoch";
      j["epoch"] = r.epoch;
      j["loss"] = r.loss;
      j["train_accuracy"] = r.train_accuracy;
      j["val_accuracy"] = r.val_accuracy;
      j["mean_entropy"] = r.mean_entropy;
      out += j.dump() + "\n";
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::vector<double>> snapshot_params(VitModel& model) {
  std::vector<std::vector<double>> out;
  for (auto& [name, p] : model.named_parameters()) {
    (void)name;
    out.push_back(p.data());
  }
  return out;
}

inline void restore_params(VitModel& model, const std::vector<std::vector<double>>& snapshot) {
  auto params = model.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.data() = snapshot[i];
}

inline std::vector<double> entropy_probe(VitModel& model, const SyntheticDataset& data,
                                         int batch_size) {
  auto cap = calibrate(model, data.val_batches(batch_size), false);
  return mean_entropy_per_layer(cap);
}

}  // namespace detail

// SGD loop with per-epoch Fisher-Yates shuffling, optional distillation
// against a frozen teacher, and divergence rollback: a non-finite loss (or a
// numeric failure inside the forward pass) restores the last end-of-epoch
// parameters and raises DivergenceError. Fully deterministic under the seed.
inline TrainLog train(VitModel& model, const SyntheticDataset& data, const TrainConfig& config,
                      const VitModel* teacher = nullptr) {
  config.validate();
  if (config.alpha > 0.0 && config.epochs > 0 && teacher == nullptr) {
    throw ContractError("alpha > 0 needs a teacher model");
  }

  TrainLog log;
  log.initial_entropy = detail::entropy_probe(model, data, config.batch_size);

  auto params = model.parameters();
  auto last_good = detail::snapshot_params(model);

  std::vector<int> order(static_cast<std::size_t>(data.config().train_size));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(mix_seed(config.seed, 0x5e0f, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    long long seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      Batch batch = data.make_batch(
          0, std::vector<int>(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(stop)));
      const int B = static_cast<int>(stop - start);

      for (Tensor& p : params) p.zero_grad();
      double loss_value = 0.0;
      try {
        Tape tape;
        Tensor logits = model.forward(batch.images);
        Tensor teacher_logits;
        if (teacher != nullptr && config.alpha > 0.0) {
          Tape::Pause pause;
          teacher_logits = teacher->forward(batch.images);
        }
        Tensor loss = distill_loss(logits, batch.labels,
                                   teacher != nullptr && config.alpha > 0.0 ? &teacher_logits
                                                                            : nullptr,
                                   config.alpha);
        loss_value = loss.value();
        if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
        tape.backward(loss);
      } catch (const NumericError& e) {
        detail::restore_params(model, last_good);
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " +
                              e.what());
      }
      sgd_step(params, config.learning_rate, config.weight_decay);
      loss_sum += loss_value * B;
      seen += B;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = seen == 0 ? 0.0 : loss_sum / static_cast<double>(seen);
    rec.train_accuracy = evaluate(model, data.train_batches(config.batch_size));
    rec.val_accuracy = evaluate(model, data.val_batches(config.batch_size));
    rec.mean_entropy = detail::entropy_probe(model, data, config.batch_size);
    log.epochs.push_back(std::move(rec));
    last_good = detail::snapshot_params(model);
  }
  return log;
}

// Distillation fine-tuning of a pruned student against its unpruned teacher.
inline TrainLog finetune(VitModel& student, const VitModel& teacher, const SyntheticDataset& data,
                         const TrainConfig& config) {
  return train(student, data, config, &teacher);
}

}  // namespace amg
