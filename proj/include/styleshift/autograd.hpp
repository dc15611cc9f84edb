#pragma once

#include "styleshift/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace styleshift {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  using BackwardFn = std::function<void(const Tensor<Scalar>&)>;

  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  template <typename Derived>
  void accumulate(const Eigen::ArrayBase<Derived>& g) {
    if (grad.empty()) grad = Tensor<Scalar>(value.shape());
    grad.array() += g;
  }
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<Scalar> value) {
    auto node = std::make_shared<Node<Scalar>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  static Var leaf(Tensor<Scalar> value, bool requires_grad = true) {
    auto v = constant(std::move(value));
    v.node_->requires_grad = requires_grad;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  /// Direct access to a leaf's value, for optimizers and loaders.
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int i) const { return node_->value.dim(i); }
  Scalar item() const { return node_->value.item(); }
  Node<Scalar>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return constant(node_->value); }

  /// Reverse pass from a scalar output; accumulates into every reachable leaf.
  void backward() const {
    if (node_->value.size() != 1) throw std::logic_error("backward() requires a scalar output");
    if (!node_->requires_grad) return;
    std::vector<NodePtr> order;  // owning, so clearing inputs below cannot free pending nodes
    std::unordered_set<Node<Scalar>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->inputs.size()) {
        NodePtr child = n->inputs[i++];
        if (child->requires_grad && seen.insert(child.get()).second) stack.push_back({std::move(child), 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad = Tensor<Scalar>(node_->value.shape(), Scalar(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<Scalar>* n = it->get();
      if (n->backward && !n->grad.empty()) {
        n->backward(n->grad);
        // interior nodes are single-use
        n->backward = nullptr;
        n->inputs.clear();
        n->grad = Tensor<Scalar>();
      }
    }
  }

 private:
  NodePtr node_;
};

/// Records an op result. The backward closure receives d(loss)/d(result).
template <typename Scalar, typename F>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, F&& backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs)
        if (in.requires_grad()) node->inputs.push_back(in.node_ptr());
      node->backward = std::forward<F>(backward);
    }
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar, typename Derived>
void accumulate_if(const Var<Scalar>& v, const Eigen::ArrayBase<Derived>& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

}  // namespace styleshift
