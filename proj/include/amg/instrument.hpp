#pragma once

#include <cstdint>
#include <map>
#include <utility>

namespace amg {

// Cost attribution buckets for the multiply-accumulate counter. One MAC is
// counted as one FLOP; softmax, divisions and normalizations are not counted.
enum class CostComponent {
  kQkvProjection,
  kAttentionProduct,
  kOutputProjection,
  kMlp,
  kEmbedding,
  kClassifier,
  kOther,
};

inline const char* cost_component_name(CostComponent c) {
  switch (c) {
    case CostComponent::kQkvProjection: return "qkv_projection";
    case CostComponent::kAttentionProduct: return "attention_product";
    case CostComponent::kOutputProjection: return "output_projection";
    case CostComponent::kMlp: return "mlp";
    case CostComponent::kEmbedding: return "embedding";
    case CostComponent::kClassifier: return "classifier";
    case CostComponent::kOther: return "other";
  }
  return "other";
}

// Collects exact MAC counts from executed matmuls, keyed by (layer, component).
// Layer -1 holds everything outside the transformer stack.
struct MacCounter {
  std::map<std::pair<int, CostComponent>, long long> macs;

  long long total() const {
    long long t = 0;
    for (const auto& [k, v] : macs) t += v;
    return t;
  }

  long long at(int layer, CostComponent c) const {
    auto it = macs.find({layer, c});
    return it == macs.end() ? 0 : it->second;
  }

  static MacCounter*& current() {
    thread_local MacCounter* c = nullptr;
    return c;
  }
};

namespace detail {

struct MacLabel {
  int layer = -1;
  CostComponent component = CostComponent::kOther;
};

inline MacLabel& mac_label() {
  thread_local MacLabel label;
  return label;
}

inline void count_macs(long long n) {
  if (MacCounter* c = MacCounter::current()) {
    const MacLabel& l = mac_label();
    c->macs[{l.layer, l.component}] += n;
  }
}

}  // namespace detail

// Installs a counter for the duration of a scope.
class MacCounterScope {
 public:
  explicit MacCounterScope(MacCounter& counter) : prev_(MacCounter::current()) {
    MacCounter::current() = &counter;
  }
  ~MacCounterScope() { MacCounter::current() = prev_; }
  MacCounterScope(const MacCounterScope&) = delete;
  MacCounterScope& operator=(const MacCounterScope&) = delete;

 private:
  MacCounter* prev_;
};

// Labels all matmuls inside a scope with (layer, component).
class MacRegion {
 public:
  MacRegion(int layer, CostComponent component) : prev_(detail::mac_label()) {
    detail::mac_label() = {layer, component};
  }
  ~MacRegion() { detail::mac_label() = prev_; }
  MacRegion(const MacRegion&) = delete;
  MacRegion& operator=(const MacRegion&) = delete;

 private:
  detail::MacLabel prev_;
};

}  // namespace amg
