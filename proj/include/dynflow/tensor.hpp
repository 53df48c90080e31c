#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dynflow/errors.hpp"

namespace dynflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

// One record of the compute graph. Nodes are numbered in creation order;
// the backward pass walks reachable nodes in descending sequence number,
// which is a valid reverse topological order.
struct Node {
  std::uint64_t seq = 0;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
  bool is_leaf() const { return !backward_fn; }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the enclosing scope (inference, oracles).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major float64 tensor with optional gradient tracking. Copies
// are shallow handles onto the same node.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(make_node(std::move(shape))) {
    std::fill(node_->data.begin(), node_->data.end(), fill);
  }

  Tensor(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_ = std::make_shared<detail::Node>();
    node_->seq = detail::next_seq();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // In-place access; reserved for parameters, optimizers and test harnesses.
  std::span<double> mutable_data() { return node_->data; }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  // Value copy without history.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  std::string_view op_name() const { return node_->op; }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  // calls; intermediate gradients are reset at the start of each sweep.
  void backward() const;

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Builds an op result. Inputs and the backward closure are only retained
  // when grad mode is on and at least one input tracks gradients.
  static Tensor from_op(Shape shape, std::vector<double> data,
                        std::initializer_list<const Tensor*> inputs,
                        std::string_view op, detail::BackwardFn fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool track = false;
    for (const Tensor* t : inputs) track = track || (t->defined() && t->requires_grad());
    if (!track) return out;
    out.node_->requires_grad = true;
    out.node_->op = op;
    for (const Tensor* t : inputs) out.node_->inputs.push_back(t->node_);
    out.node_->backward_fn = std::move(fn);
    return out;
  }

  static Tensor from_op(Shape shape, std::vector<double> data,
                        std::span<const Tensor> inputs, std::string_view op,
                        detail::BackwardFn fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool track = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
    if (!track) return out;
    out.node_->requires_grad = true;
    out.node_->op = op;
    for (const Tensor& t : inputs) out.node_->inputs.push_back(t.node_);
    out.node_->backward_fn = std::move(fn);
    return out;
  }

 private:
  static std::shared_ptr<detail::Node> make_node(Shape shape) {
    auto node = std::make_shared<detail::Node>();
    node->seq = detail::next_seq();
    node->data.resize(shape_numel(shape));
    node->shape = std::move(shape);
    return node;
  }

  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_str(shape()));
  }
  if (!requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace dynflow
