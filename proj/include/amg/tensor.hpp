#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "amg/errors.hpp"

namespace amg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major f64 storage plus an optional gradient buffer of the same
// shape. Nodes are shared between the Tensor handles that view them and the
// tape entries that will write their gradients.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward first touches this node

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle onto a shared TensorNode. Copying a Tensor aliases
// the node; data is immutable after construction except through grad buffers
// and explicit parameter updates.
struct Tensor {
  std::shared_ptr<TensorNode> node;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data.assign(shape_numel(shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (double& v : t.node->data) v = value;
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  int rank() const { return static_cast<int>(node->shape.size()); }
  int dim(int i) const { return node->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return node->data.size(); }

  std::vector<double>& data() { return node->data; }
  const std::vector<double>& data() const { return node->data; }

  bool requires_grad() const { return node->requires_grad; }
  void set_requires_grad(bool rg) { node->requires_grad = rg; }

  bool has_grad() const { return !node->grad.empty(); }
  std::vector<double>& grad() {
    if (node->grad.empty()) throw ContractError("gradient not populated; run backward first");
    return node->grad;
  }
  const std::vector<double>& grad() const {
    if (node->grad.empty()) throw ContractError("gradient not populated; run backward first");
    return node->grad;
  }
  void zero_grad() {
    if (!node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  }

  double value() const {
    if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
    return node->data[0];
  }

  // Row-major offset of a full multi-index.
  std::size_t offset(std::initializer_list<int> idx) const {
    if (idx.size() != node->shape.size()) {
      throw ShapeError("index rank does not match tensor rank");
    }
    std::size_t off = 0;
    auto it = idx.begin();
    for (std::size_t i = 0; i < node->shape.size(); ++i, ++it) {
      off = off * static_cast<std::size_t>(node->shape[i]) + static_cast<std::size_t>(*it);
    }
    return off;
  }
  double at(std::initializer_list<int> idx) const { return node->data[offset(idx)]; }

  // Deep copy; the clone shares nothing with the source.
  Tensor clone() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node->shape;
    n->data = node->data;
    n->requires_grad = node->requires_grad;
    return Tensor(n);
  }
};

// Define-by-run tape. Constructing a Tape makes it the active recorder on the
// current thread; operations append backward rules while it is active, and
// backward() replays them in reverse. One tape and its tensors belong to one
// thread; independent tapes on other threads never share state.
class Tape {
 public:
  Tape() : prev_(current()) { current() = this; }
  ~Tape() { current() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(const std::shared_ptr<TensorNode>& output, std::function<void()> rule) {
    outputs_.insert(output.get());
    entries_.push_back(std::move(rule));
  }

  bool recorded(const TensorNode* n) const { return outputs_.count(n) != 0; }

  // Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse
  // order, accumulating into the grad buffer of each requires_grad node on
  // the path from loss back to the leaves.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!recorded(loss.node.get())) {
      throw ContractError("backward: loss was not produced through this tape");
    }
    loss.node->ensure_grad();
    loss.node->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  // Temporarily suspends recording (teacher inference, evaluation passes).
  class Pause {
   public:
    Pause() : saved_(current()) { current() = nullptr; }
    ~Pause() { current() = saved_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* saved_;
  };

 private:
  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<std::function<void()>> entries_;
  std::unordered_set<const TensorNode*> outputs_;
  Tape* prev_;
};

}  // namespace amg
