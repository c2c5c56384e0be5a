#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "amg/dataset.hpp"
#include "amg/errors.hpp"
#include "amg/ops.hpp"
#include "amg/vit.hpp"

namespace amg {

enum class UnitKind { kHead, kToken };

inline const char* unit_kind_name(UnitKind k) { return k == UnitKind::kHead ? "head" : "token"; }

// One scored prunable unit. For heads, raw is the attention-map entropy and
// unit_id is the current slot. For tokens, raw is the gradient-weighted
// importance and unit_id is the absolute token index. weighted starts equal
// to raw until the scheduler applies the layer coefficient.
struct ImportanceScore {
  UnitKind kind = UnitKind::kHead;
  int layer = 0;
  int unit_id = 0;
  double raw = 0.0;
  double weighted = 0.0;
  int samples = 0;
  // Original head id for traceability across earlier surgeries; equals
  // unit_id for tokens.
  int original_id = 0;
};

enum class EntropySource { kAveragedMap, kMeanPerSample };
enum class TokenReduction { kColumn, kRow };

// Per-(layer, head) attention maps and their loss gradients, accumulated as
// running means over every calibration sample. Key activations ride along for
// the Taylor baseline.
struct AttentionCapture {
  int samples = 0;
  bool has_gradients = false;
  int tokens = 0;  // N
  std::vector<int> heads;                    // H_l at calibration time
  std::vector<std::vector<int>> head_ids;    // original ids per slot
  std::vector<std::vector<int>> kv_indices;  // absolute kv token ids per layer
  std::vector<Tensor> attn_mean;             // per layer [H, N, Nkv]
  std::vector<Tensor> attn_grad_mean;        // per layer [H, N, Nkv]
  std::vector<Tensor> key_mean;              // per layer [N, H*d]
  std::vector<Tensor> key_grad_mean;         // per layer [N, H*d]
  std::vector<std::vector<double>> entropy_per_sample_mean;  // per layer, per head

  void require_maps() const {
    if (samples == 0) throw NotCalibratedError("attention capture is empty; run calibrate first");
  }
  void require_gradients() const {
    require_maps();
    if (!has_gradients) {
      throw NotCalibratedError("capture holds no gradients; calibrate with gradients enabled");
    }
  }
  int layer_count() const { return static_cast<int>(heads.size()); }

  void check_layer(int layer) const {
    if (layer < 0 || layer >= layer_count()) {
      throw ContractError("layer " + std::to_string(layer) + " out of range [0," +
                          std::to_string(layer_count()) + ")");
    }
  }
};

namespace detail {

inline double plogp(double p) { return p > 0.0 ? -p * std::log(p) : 0.0; }

// Welford running mean, elementwise: mean += (x - mean) / n. Exact for
// repeated identical samples.
inline void running_mean_update(std::vector<double>& mean, const double* x, std::size_t len,
                                double inv_n) {
  for (std::size_t i = 0; i < len; ++i) mean[i] += (x[i] - mean[i]) * inv_n;
}

inline double map_entropy(const double* a, std::size_t len) {
  double s = 0.0;
  for (std::size_t i = 0; i < len; ++i) s += plogp(a[i]);
  return s;
}

}  // namespace detail

// Runs forward (and backward, unless disabled) over every batch, accumulating
// running means of each layer's attention maps, their gradients, and the key
// activations. Gradients are stored as per-sample gradients of the per-sample
// cross-entropy loss.
inline AttentionCapture calibrate(VitModel& model, const std::vector<Batch>& batches,
                                  bool with_gradients = true) {
  if (batches.empty()) throw ContractError("calibrate needs at least one batch");
  AttentionCapture cap;
  cap.tokens = model.spec.tokens();
  cap.heads = model.spec.heads_per_layer;
  const int L = model.spec.layers;
  for (int l = 0; l < L; ++l) {
    cap.head_ids.push_back(model.layers[static_cast<std::size_t>(l)].head_ids);
    const auto& retained = model.spec.retained_kv_indices[static_cast<std::size_t>(l)];
    if (retained.empty()) {
      std::vector<int> all;
      for (int i = 0; i < cap.tokens; ++i) all.push_back(i);
      cap.kv_indices.push_back(all);
    } else {
      cap.kv_indices.push_back(retained);
    }
    const int H = model.spec.heads(l);
    const int nkv = static_cast<int>(cap.kv_indices.back().size());
    cap.attn_mean.push_back(Tensor::zeros({H, cap.tokens, nkv}));
    cap.attn_grad_mean.push_back(Tensor::zeros({H, cap.tokens, nkv}));
    cap.key_mean.push_back(Tensor::zeros({cap.tokens, H * model.spec.head_dim}));
    cap.key_grad_mean.push_back(Tensor::zeros({cap.tokens, H * model.spec.head_dim}));
    cap.entropy_per_sample_mean.push_back(std::vector<double>(static_cast<std::size_t>(H), 0.0));
  }
  cap.has_gradients = with_gradients;

  for (const auto& batch : batches) {
    const int B = batch.images.dim(0);
    ForwardTrace trace;
    if (with_gradients) {
      Tape tape;
      Tensor logits = model.forward(batch.images, &trace);
      Tensor loss = cross_entropy(logits, batch.labels);
      tape.backward(loss);
    } else {
      Tape::Pause pause;
      Tensor logits = model.forward(batch.images, &trace);
      (void)logits;
    }
    for (int b = 0; b < B; ++b) {
      const int n = ++cap.samples;
      const double inv_n = 1.0 / n;
      for (int l = 0; l < L; ++l) {
        const Tensor& attn = trace.attention[static_cast<std::size_t>(l)];
        const Tensor& keys = trace.keys[static_cast<std::size_t>(l)];
        const std::size_t map_len = static_cast<std::size_t>(attn.dim(1)) * attn.dim(2) * attn.dim(3);
        const std::size_t key_len = static_cast<std::size_t>(keys.dim(1)) * keys.dim(2);
        const double* a = attn.data().data() + static_cast<std::size_t>(b) * map_len;
        detail::running_mean_update(cap.attn_mean[static_cast<std::size_t>(l)].data(), a, map_len,
                                    inv_n);
        const double* k = keys.data().data() + static_cast<std::size_t>(b) * key_len;
        detail::running_mean_update(cap.key_mean[static_cast<std::size_t>(l)].data(), k, key_len,
                                    inv_n);
        const int H = attn.dim(1);
        const std::size_t head_len = map_len / static_cast<std::size_t>(H);
        for (int h = 0; h < H; ++h) {
          double& m = cap.entropy_per_sample_mean[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
          const double s = detail::map_entropy(a + static_cast<std::size_t>(h) * head_len, head_len);
          m += (s - m) * inv_n;
        }
        if (with_gradients) {
          if (attn.node->grad.empty() || keys.node->grad.empty()) {
            throw NotCalibratedError("no gradients reached layer " + std::to_string(l) +
                                     "; model parameters are not tracked");
          }
          // Batch loss is the mean of per-sample losses, so the tape gradient
          // carries a 1/B factor; scale back to per-sample units.
          std::vector<double> scaled(map_len);
          const double* g = attn.node->grad.data() + static_cast<std::size_t>(b) * map_len;
          for (std::size_t i = 0; i < map_len; ++i) scaled[i] = g[i] * B;
          detail::running_mean_update(cap.attn_grad_mean[static_cast<std::size_t>(l)].data(),
                                      scaled.data(), map_len, inv_n);
          std::vector<double> kscaled(key_len);
          const double* kg = keys.node->grad.data() + static_cast<std::size_t>(b) * key_len;
          for (std::size_t i = 0; i < key_len; ++i) kscaled[i] = kg[i] * B;
          detail::running_mean_update(cap.key_grad_mean[static_cast<std::size_t>(l)].data(),
                                      kscaled.data(), key_len, inv_n);
        }
      }
    }
  }
  if (with_gradients) {
    for (auto& [name, p] : model.named_parameters()) {
      (void)name;
      p.zero_grad();
    }
  }
  return cap;
}

// Information entropy of the calibration-averaged attention map of
// one head: sum over all entries of -A ln A, with 0 ln 0 taken as 0. The
// alternative source averages per-sample map entropies instead.
inline double head_entropy(const AttentionCapture& cap, int layer, int head,
                           EntropySource source = EntropySource::kAveragedMap) {
  cap.require_maps();
  cap.check_layer(layer);
  const int H = cap.heads[static_cast<std::size_t>(layer)];
  if (head < 0 || head >= H) {
    throw ContractError("head " + std::to_string(head) + " out of range [0," + std::to_string(H) + ")");
  }
  if (source == EntropySource::kMeanPerSample) {
    return cap.entropy_per_sample_mean[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)];
  }
  const Tensor& maps = cap.attn_mean[static_cast<std::size_t>(layer)];
  const std::size_t head_len = static_cast<std::size_t>(maps.dim(1)) * maps.dim(2);
  return detail::map_entropy(maps.data().data() + static_cast<std::size_t>(head) * head_len, head_len);
}

// Gradient-weighted attention importance of one key/value token: the mean
// over heads of the absolute gradient-times-map mass of that token's column
// (all query rows). The row reduction sums the token's query row instead.
inline double token_importance(const AttentionCapture& cap, int layer, int token,
                               TokenReduction reduction = TokenReduction::kColumn) {
  cap.require_gradients();
  cap.check_layer(layer);
  if (token == 0) {
    throw ClassTokenError("token importance of the class token is never computed");
  }
  if (token < 0 || token >= cap.tokens) {
    throw ContractError("token " + std::to_string(token) + " out of range [0," +
                        std::to_string(cap.tokens) + ")");
  }
  const Tensor& maps = cap.attn_mean[static_cast<std::size_t>(layer)];
  const Tensor& grads = cap.attn_grad_mean[static_cast<std::size_t>(layer)];
  const int H = maps.dim(0);
  const int N = maps.dim(1);
  const int nkv = maps.dim(2);

  double acc = 0.0;
  if (reduction == TokenReduction::kColumn) {
    const auto& kv = cap.kv_indices[static_cast<std::size_t>(layer)];
    int col = -1;
    for (std::size_t j = 0; j < kv.size(); ++j) {
      if (kv[j] == token) {
        col = static_cast<int>(j);
        break;
      }
    }
    if (col < 0) {
      throw ContractError("token " + std::to_string(token) + " is not retained in layer " +
                          std::to_string(layer));
    }
    for (int h = 0; h < H; ++h) {
      for (int q = 0; q < N; ++q) {
        const std::size_t off = (static_cast<std::size_t>(h) * N + q) * nkv + col;
        acc += grads.data()[off] * maps.data()[off];
      }
    }
  } else {
    for (int h = 0; h < H; ++h) {
      for (int j = 0; j < nkv; ++j) {
        const std::size_t off = (static_cast<std::size_t>(h) * N + token) * nkv + j;
        acc += grads.data()[off] * maps.data()[off];
      }
    }
  }
  return std::abs(acc / H);
}

// Taylor-expansion baseline: absolute mean over dimensions of gradient times
// key activation for one token.
inline double taylor_token_importance(const AttentionCapture& cap, int layer, int token) {
  cap.require_gradients();
  cap.check_layer(layer);
  if (token == 0) {
    throw ClassTokenError("token importance of the class token is never computed");
  }
  if (token < 0 || token >= cap.tokens) {
    throw ContractError("token " + std::to_string(token) + " out of range [0," +
                        std::to_string(cap.tokens) + ")");
  }
  const Tensor& keys = cap.key_mean[static_cast<std::size_t>(layer)];
  const Tensor& grads = cap.key_grad_mean[static_cast<std::size_t>(layer)];
  const int width = keys.dim(1);
  double acc = 0.0;
  for (int c = 0; c < width; ++c) {
    const std::size_t off = static_cast<std::size_t>(token) * width + c;
    acc += grads.data()[off] * keys.data()[off];
  }
  return std::abs(acc / width);
}

// Every head of every layer, raw = entropy.
inline std::vector<ImportanceScore> head_scores(const AttentionCapture& cap,
                                                EntropySource source = EntropySource::kAveragedMap) {
  cap.require_maps();
  std::vector<ImportanceScore> out;
  for (int l = 0; l < cap.layer_count(); ++l) {
    for (int h = 0; h < cap.heads[static_cast<std::size_t>(l)]; ++h) {
      ImportanceScore s;
      s.kind = UnitKind::kHead;
      s.layer = l;
      s.unit_id = h;
      s.original_id = cap.head_ids[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
      s.raw = head_entropy(cap, l, h, source);
      s.weighted = s.raw;
      s.samples = cap.samples;
      out.push_back(s);
    }
  }
  return out;
}

enum class TokenCriterion { kGradientAttention, kTaylor };

// Every prunable (non-class) retained token of every layer.
inline std::vector<ImportanceScore> token_scores(
    const AttentionCapture& cap, TokenCriterion criterion = TokenCriterion::kGradientAttention,
    TokenReduction reduction = TokenReduction::kColumn) {
  cap.require_gradients();
  std::vector<ImportanceScore> out;
  for (int l = 0; l < cap.layer_count(); ++l) {
    for (int token : cap.kv_indices[static_cast<std::size_t>(l)]) {
      if (token == 0) continue;
      ImportanceScore s;
      s.kind = UnitKind::kToken;
      s.layer = l;
      s.unit_id = token;
      s.original_id = token;
      s.raw = criterion == TokenCriterion::kGradientAttention
                  ? token_importance(cap, l, token, reduction)
                  : taylor_token_importance(cap, l, token);
      s.weighted = s.raw;
      s.samples = cap.samples;
      out.push_back(s);
    }
  }
  return out;
}

// Mean head entropy per layer on the averaged maps; the per-layer summary
// statistic logged every epoch.
inline std::vector<double> mean_entropy_per_layer(const AttentionCapture& cap) {
  cap.require_maps();
  std::vector<double> out;
  for (int l = 0; l < cap.layer_count(); ++l) {
    double sum = 0.0;
    const int H = cap.heads[static_cast<std::size_t>(l)];
    for (int h = 0; h < H; ++h) sum += head_entropy(cap, l, h);
    out.push_back(sum / H);
  }
  return out;
}

}  // namespace amg
