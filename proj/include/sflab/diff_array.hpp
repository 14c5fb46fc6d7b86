#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sflab/common.hpp"

namespace sflab {

namespace detail {

// One node of the computation graph.  Leaves have no backward function;
// interior nodes carry a closure that scatters this node's gradient into its
// parents.  The graph is acyclic by construction: parents always exist before
// the node that references them.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, only for gradient-requiring nodes
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;  // gradient-requiring inputs only
  std::function<void(Node&)> backward;

  int64_t size() const { return static_cast<int64_t>(values.size()); }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense float64 array participating in reverse-mode differentiation.  Value
// semantics: copying the handle shares the underlying node.
class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray leaf(Shape shape, std::vector<double> values, bool requires_grad = false) {
    check_shape_valid(shape, "DiffArray");
    if (shape_size(shape) != static_cast<int64_t>(values.size())) {
      throw std::invalid_argument("DiffArray: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_size(shape)) + " values, got " +
                                  std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return DiffArray(std::move(node));
  }

  static DiffArray full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), value);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static DiffArray zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static DiffArray scalar(double value) { return leaf({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return node_->size(); }
  int64_t extent(int axis) const { return node_->shape[axis]; }

  std::span<const double> values() const { return node_->values; }
  // Direct write access; meaningful for leaves (optimizer updates, test rigs).
  std::span<double> mutable_values() { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  double item() const {
    if (size() != 1) {
      throw std::invalid_argument("DiffArray::item: array has " + std::to_string(size()) +
                                  " elements");
    }
    return node_->values[0];
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit DiffArray(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an interior node.  `parents` lists the gradient-requiring inputs; the
// backward closure is installed only when at least one input needs gradients,
// so constant subgraphs cost nothing at backprop time.
inline DiffArray make_op(Shape shape, std::vector<double> values,
                         std::vector<std::shared_ptr<Node>> grad_parents,
                         std::function<void(Node&)> backward) {
  check_shape_valid(shape, "DiffArray");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (!grad_parents.empty()) {
    node->requires_grad = true;
    node->parents = std::move(grad_parents);
    node->backward = std::move(backward);
  }
  return DiffArray(std::move(node));
}

inline std::vector<std::shared_ptr<Node>> grad_parents_of(
    std::initializer_list<const DiffArray*> inputs) {
  std::vector<std::shared_ptr<Node>> out;
  for (const DiffArray* a : inputs) {
    if (a->requires_grad()) out.push_back(a->node());
  }
  return out;
}

}  // namespace detail

// Populates gradients of every gradient-requiring node that `loss` depends on,
// in reverse topological order.  A graph can be backpropagated once; reusing
// it without rebuilding is rejected rather than silently accumulating twice.
inline void backprop(const DiffArray& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backprop: loss must be a scalar");
  }
  auto root = loss.node();
  if (!root->requires_grad) {
    throw std::invalid_argument("backprop: loss does not depend on any gradient-requiring input");
  }

  // Iterative post-order DFS over gradient-requiring ancestors.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* node : order) {
    if (node->backward && node->backward_done) {
      throw std::runtime_error("backprop: graph already backpropagated; rebuild it first");
    }
  }

  root->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;
    for (auto& parent : node->parents) parent->ensure_grad();
    if (!node->grad.empty()) node->backward(*node);
    node->backward_done = true;
  }
}

}  // namespace sflab
