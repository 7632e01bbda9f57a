#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualpath/tensor.hpp"

namespace dualpath {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of the node it is attached to and accumulates into inputs.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  // Adds `delta` into this node's gradient, allocating it on first use.
  template <typename Derived>
  void accumulate(const Eigen::ArrayBase<Derived>& delta) {
    if (!requires_grad) return;
    if (grad.empty()) grad = Tensor<Scalar>::zeros(value.shape());
    grad.array() += delta;
  }
};

// Handle onto a graph node. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var leaf(Tensor<Scalar> value, bool requires_grad = true) {
    auto node = std::make_shared<Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->op = "leaf";
    return Var(std::move(node));
  }

  static Var constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t axis) const { return node_->value.dim(axis); }

  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Creates the result node of an operation. Inputs and the backward closure
// are dropped when no input needs a gradient, so constant subgraphs free
// their saved activations immediately.
template <typename Scalar>
Var<Scalar> make_result(const char* op, Tensor<Scalar> value,
                        std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                        std::function<void(Node<Scalar>&)> backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in output " + to_string(value.shape()));
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& input : inputs) node->requires_grad = node->requires_grad || input->requires_grad;
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

// Reverse-mode sweep from a scalar root. Interior gradients are recomputed
// on every call; leaf gradients accumulate across calls until zeroed.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw UsageError("backward requires a scalar root, got shape " +
                     (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.node()->requires_grad) return;

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<Scalar>* node : order) {
    if (!node->is_leaf()) node->grad = Tensor<Scalar>();
  }
  Node<Scalar>& top = *root.node();
  top.accumulate(Tensor<Scalar>::Array::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->is_leaf() || node->grad.empty()) continue;
    node->backward(*node);
  }
}

}  // namespace dualpath
