#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "amg/instrument.hpp"
#include "amg/model_spec.hpp"
#include "amg/ops.hpp"
#include "amg/rng.hpp"
#include "amg/tensor.hpp"

namespace amg {

struct LayerParams {
  Tensor ln1_gain, ln1_shift;
  Tensor wq, wk, wv;  // [D, H_l*d], head h occupies column block [h*d, (h+1)*d)
  Tensor wo;          // [H_l*d, D], head h occupies the matching row block
  Tensor ln2_gain, ln2_shift;
  Tensor mlp_w1, mlp_b1;
  Tensor mlp_w2, mlp_b2;
  // Original head ids of the surviving slots, for report traceability.
  std::vector<int> head_ids;
};

// Attention maps (and the key activations feeding the Taylor baseline) of one
// forward pass, one entry per layer. Tensors stay tape-connected, so running
// backward afterwards fills their grad buffers.
struct ForwardTrace {
  std::vector<Tensor> attention;  // [B, H_l, N, Nkv_l], post-softmax, post-index
  std::vector<Tensor> keys;       // [B, N, H_l*d], pre-gather
};

struct VitModel {
  ModelSpec spec;
  Tensor patch_w, patch_b;  // [C*p*p, D], [D]
  Tensor cls_token;         // [D]
  Tensor pos_embed;         // [N, D]
  std::vector<LayerParams> layers;
  Tensor final_ln_gain, final_ln_shift;
  Tensor head_w, head_b;  // [D, classes], [classes]

  // Zero-filled parameter blocks of the right shapes (layernorm gains at 1).
  static VitModel allocate(const ModelSpec& spec) {
    spec.validate();
    VitModel m;
    m.spec = spec;
    const int D = spec.embed_dim;
    const int pd = spec.channels * spec.patch_size * spec.patch_size;
    const int M = spec.mlp_hidden();
    auto zeros = [](const Shape& shape) { return Tensor::zeros(shape, true); };
    auto ones = [](const Shape& shape) { return Tensor::full(shape, 1.0, true); };

    m.patch_w = zeros({pd, D});
    m.patch_b = zeros({D});
    m.cls_token = zeros({D});
    m.pos_embed = zeros({spec.tokens(), D});
    for (int l = 0; l < spec.layers; ++l) {
      LayerParams p;
      const int hd = spec.heads(l) * spec.head_dim;
      p.ln1_gain = ones({D});
      p.ln1_shift = zeros({D});
      p.wq = zeros({D, hd});
      p.wk = zeros({D, hd});
      p.wv = zeros({D, hd});
      p.wo = zeros({hd, D});
      p.ln2_gain = ones({D});
      p.ln2_shift = zeros({D});
      p.mlp_w1 = zeros({D, M});
      p.mlp_b1 = zeros({M});
      p.mlp_w2 = zeros({M, D});
      p.mlp_b2 = zeros({D});
      p.head_ids.resize(static_cast<std::size_t>(spec.heads(l)));
      for (int h = 0; h < spec.heads(l); ++h) p.head_ids[static_cast<std::size_t>(h)] = h;
      m.layers.push_back(std::move(p));
    }
    m.final_ln_gain = ones({D});
    m.final_ln_shift = zeros({D});
    m.head_w = zeros({D, spec.num_classes});
    m.head_b = zeros({spec.num_classes});
    return m;
  }

  // Truncated-normal projections (sigma 0.02), zero biases, unit gains. The
  // query/key projections start wider so the attention logits are inside the
  // trainable range of the softmax instead of pinned at uniform.
  static VitModel init(const ModelSpec& spec, std::uint64_t seed) {
    VitModel m = allocate(spec);
    Rng rng(mix_seed(seed, 0xa119'77ee));
    auto fill = [&](Tensor& t, double sigma = 0.02) {
      for (auto& v : t.data()) v = rng.truncated_normal(sigma);
    };
    fill(m.patch_w);
    fill(m.cls_token);
    fill(m.pos_embed);
    for (auto& p : m.layers) {
      fill(p.wq, 0.1);
      fill(p.wk, 0.1);
      fill(p.wv);
      fill(p.wo);
      fill(p.mlp_w1);
      fill(p.mlp_w2);
    }
    fill(m.head_w);
    return m;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch_embed.weight", patch_w);
    out.emplace_back("patch_embed.bias", patch_b);
    out.emplace_back("cls_token", cls_token);
    out.emplace_back("pos_embed", pos_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& lp = layers[l];
      out.emplace_back(p + "ln1.gain", lp.ln1_gain);
      out.emplace_back(p + "ln1.shift", lp.ln1_shift);
      out.emplace_back(p + "wq", lp.wq);
      out.emplace_back(p + "wk", lp.wk);
      out.emplace_back(p + "wv", lp.wv);
      out.emplace_back(p + "wo", lp.wo);
      out.emplace_back(p + "ln2.gain", lp.ln2_gain);
      out.emplace_back(p + "ln2.shift", lp.ln2_shift);
      out.emplace_back(p + "mlp.w1", lp.mlp_w1);
      out.emplace_back(p + "mlp.b1", lp.mlp_b1);
      out.emplace_back(p + "mlp.w2", lp.mlp_w2);
      out.emplace_back(p + "mlp.b2", lp.mlp_b2);
    }
    out.emplace_back("final_ln.gain", final_ln_gain);
    out.emplace_back("final_ln.shift", final_ln_shift);
    out.emplace_back("classifier.weight", head_w);
    out.emplace_back("classifier.bias", head_b);
    return out;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // images: [B, C, S, S] -> logits [B, num_classes]. With a trace supplied,
  // each layer's post-softmax attention map and pre-gather key activations
  // are exposed as tape-connected tensors.
  Tensor forward(const Tensor& images, ForwardTrace* trace = nullptr) const {
    if (images.rank() != 4 || images.dim(1) != spec.channels || images.dim(2) != spec.image_size ||
        images.dim(3) != spec.image_size) {
      throw ShapeError("forward: images " + shape_str(images.shape()) + " do not match spec [B," +
                       std::to_string(spec.channels) + "," + std::to_string(spec.image_size) + "," +
                       std::to_string(spec.image_size) + "]");
    }
    const int B = images.dim(0);
    const int N = spec.tokens();
    const int d = spec.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    if (trace) {
      trace->attention.clear();
      trace->keys.clear();
    }

    Tensor x;
    {
      MacRegion region(-1, CostComponent::kEmbedding);
      Tensor patches = extract_patches(images, spec.patch_size);
      x = add(matmul(patches, patch_w), patch_b);
    }
    x = prepend_token(cls_token, x);
    x = add(x, pos_embed);

    for (int l = 0; l < spec.layers; ++l) {
      const LayerParams& p = layers[static_cast<std::size_t>(l)];
      const int H = spec.heads(l);
      Tensor h = layernorm(x, p.ln1_gain, p.ln1_shift);
      Tensor q, k, v;
      {
        MacRegion region(l, CostComponent::kQkvProjection);
        q = matmul(h, p.wq);
        k = matmul(h, p.wk);
        v = matmul(h, p.wv);
      }
      if (trace) trace->keys.push_back(k);
      Tensor qh = transpose(reshape(q, {B, N, H, d}), 1, 2);  // [B,H,N,d]
      Tensor kh = transpose(reshape(k, {B, N, H, d}), 1, 2);
      Tensor vh = transpose(reshape(v, {B, N, H, d}), 1, 2);
      const auto& kv_idx = spec.retained_kv_indices[static_cast<std::size_t>(l)];
      if (!kv_idx.empty()) {
        kh = gather(kh, 2, kv_idx);
        vh = gather(vh, 2, kv_idx);
      }
      Tensor ctx;
      {
        MacRegion region(l, CostComponent::kAttentionProduct);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);  // [B,H,N,Nkv]
        Tensor attn = softmax_rows(scores);
        if (trace) trace->attention.push_back(attn);
        ctx = matmul(attn, vh);  // [B,H,N,d]
      }
      Tensor ctx_flat = reshape(transpose(ctx, 1, 2), {B, N, H * d});
      Tensor attn_out;
      {
        MacRegion region(l, CostComponent::kOutputProjection);
        attn_out = matmul(ctx_flat, p.wo);
      }
      x = add(x, attn_out);

      Tensor h2 = layernorm(x, p.ln2_gain, p.ln2_shift);
      Tensor mlp_out;
      {
        MacRegion region(l, CostComponent::kMlp);
        Tensor m1 = gelu(add(matmul(h2, p.mlp_w1), p.mlp_b1));
        mlp_out = add(matmul(m1, p.mlp_w2), p.mlp_b2);
      }
      x = add(x, mlp_out);
    }

    Tensor cls = select_token(layernorm(x, final_ln_gain, final_ln_shift), 0);
    MacRegion region(-1, CostComponent::kClassifier);
    return add(matmul(cls, head_w), head_b);
  }

  VitModel clone() const {
    VitModel m;
    m.spec = spec;
    m.patch_w = patch_w.clone();
    m.patch_b = patch_b.clone();
    m.cls_token = cls_token.clone();
    m.pos_embed = pos_embed.clone();
    for (const auto& p : layers) {
      LayerParams c;
      c.ln1_gain = p.ln1_gain.clone();
      c.ln1_shift = p.ln1_shift.clone();
      c.wq = p.wq.clone();
      c.wk = p.wk.clone();
      c.wv = p.wv.clone();
      c.wo = p.wo.clone();
      c.ln2_gain = p.ln2_gain.clone();
      c.ln2_shift = p.ln2_shift.clone();
      c.mlp_w1 = p.mlp_w1.clone();
      c.mlp_b1 = p.mlp_b1.clone();
      c.mlp_w2 = p.mlp_w2.clone();
      c.mlp_b2 = p.mlp_b2.clone();
      c.head_ids = p.head_ids;
      m.layers.push_back(std::move(c));
    }
    m.final_ln_gain = final_ln_gain.clone();
    m.final_ln_shift = final_ln_shift.clone();
    m.head_w = head_w.clone();
    m.head_b = head_b.clone();
    return m;
  }
};

namespace detail {

// New matrix with the d-wide column blocks of the given slots removed.
inline Tensor drop_column_blocks(const Tensor& w, const std::vector<int>& keep_slots, int d) {
  const int rows = w.dim(0);
  const int new_cols = static_cast<int>(keep_slots.size()) * d;
  Tensor out = Tensor::zeros({rows, new_cols}, w.requires_grad());
  for (int r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < keep_slots.size(); ++j) {
      for (int c = 0; c < d; ++c) {
        out.data()[static_cast<std::size_t>(r) * new_cols + j * d + c] =
            w.data()[static_cast<std::size_t>(r) * w.dim(1) +
                     static_cast<std::size_t>(keep_slots[j]) * d + c];
      }
    }
  }
  return out;
}

inline Tensor drop_row_blocks(const Tensor& w, const std::vector<int>& keep_slots, int d) {
  const int cols = w.dim(1);
  const int new_rows = static_cast<int>(keep_slots.size()) * d;
  Tensor out = Tensor::zeros({new_rows, cols}, w.requires_grad());
  for (std::size_t j = 0; j < keep_slots.size(); ++j) {
    for (int r = 0; r < d; ++r) {
      const double* src =
          w.data().data() + (static_cast<std::size_t>(keep_slots[j]) * d + r) * cols;
      double* dst = out.data().data() + (j * d + r) * cols;
      std::copy(src, src + cols, dst);
    }
  }
  return out;
}

}  // namespace detail

// Physically deletes the named head slots from a layer: the d-wide column
// blocks of W^q/W^k/W^v and the matching row blocks of W^o. Surviving slots
// renumber contiguously; head_ids keeps their original identities.
inline void remove_heads(VitModel& model, int layer, const std::vector<int>& slots) {
  if (layer < 0 || layer >= model.spec.layers) {
    throw ContractError("remove_heads: layer " + std::to_string(layer) + " out of range");
  }
  LayerParams& p = model.layers[static_cast<std::size_t>(layer)];
  const int H = model.spec.heads(layer);
  std::set<int> doomed;
  for (int s : slots) {
    if (s < 0 || s >= H) {
      throw ContractError("remove_heads: slot " + std::to_string(s) + " out of range [0," +
                          std::to_string(H) + ")");
    }
    if (!doomed.insert(s).second) {
      throw ContractError("remove_heads: slot " + std::to_string(s) + " listed twice");
    }
  }
  if (doomed.empty()) return;
  if (static_cast<int>(doomed.size()) >= H) {
    throw ContractError("remove_heads: layer " + std::to_string(layer) +
                        " would be left with no heads");
  }
  std::vector<int> keep;
  for (int h = 0; h < H; ++h) {
    if (!doomed.count(h)) keep.push_back(h);
  }
  const int d = model.spec.head_dim;
  p.wq = detail::drop_column_blocks(p.wq, keep, d);
  p.wk = detail::drop_column_blocks(p.wk, keep, d);
  p.wv = detail::drop_column_blocks(p.wv, keep, d);
  p.wo = detail::drop_row_blocks(p.wo, keep, d);
  std::vector<int> ids;
  for (int h : keep) ids.push_back(p.head_ids[static_cast<std::size_t>(h)]);
  p.head_ids = std::move(ids);
  model.spec.heads_per_layer[static_cast<std::size_t>(layer)] = static_cast<int>(keep.size());
}

// Installs a key/value token index set on one layer. Indices are absolute
// token positions; queries keep all N tokens and softmax renormalizes over
// the retained keys only.
inline void apply_kv_index(VitModel& model, int layer, const std::vector<int>& indices) {
  if (layer < 0 || layer >= model.spec.layers) {
    throw ContractError("apply_kv_index: layer " + std::to_string(layer) + " out of range");
  }
  if (indices.empty() || indices.front() != 0) {
    throw ClassTokenError("apply_kv_index: layer " + std::to_string(layer) +
                          " index set must start with the class token (index 0)");
  }
  for (std::size_t i = 1; i < indices.size(); ++i) {
    if (indices[i] <= indices[i - 1]) {
      throw ContractError("apply_kv_index: indices must be strictly increasing");
    }
  }
  if (indices.back() >= model.spec.tokens()) {
    throw ContractError("apply_kv_index: index " + std::to_string(indices.back()) +
                        " out of range [0," + std::to_string(model.spec.tokens()) + ")");
  }
  model.spec.retained_kv_indices[static_cast<std::size_t>(layer)] = indices;
}

}  // namespace amg
