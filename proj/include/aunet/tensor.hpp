#pragma once

// Dense f64 tensors with a dynamically built reverse-mode differentiation graph.
//
// A Tensor is a cheap shared handle onto a graph node. Operations producing a
// tensor from inputs that require gradients record the inputs and a backward
// closure; backward() walks the recorded graph once in reverse topological
// order and then releases it.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aunet/errors.hpp"

namespace aunet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  Relu,
  Sigmoid,
  SoftmaxChannel,
  ConcatChannels,
  SliceChannels,
  Sum,
  Conv3d,
  MaxPool3d,
  Trilinear,
  BatchNorm,
  GateApply,
  DiceLoss,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::SoftmaxChannel: return "softmax_channel";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::SliceChannels: return "slice_channels";
    case OpKind::Sum: return "sum";
    case OpKind::Conv3d: return "conv3d";
    case OpKind::MaxPool3d: return "max_pool3d";
    case OpKind::Trilinear: return "trilinear_resample";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::GateApply: return "gate_apply";
    case OpKind::DiceLoss: return "dice_loss";
  }
  return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// While alive, operations on this thread record no graph edges.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// One vertex of the differentiation graph.
///
/// `backward_fn` reads `grad` of this node and accumulates into the inputs'
/// gradients. Saved context lives in the closure.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = next_id();

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  /// Gradient buffer, zero-allocated on first use.
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + detail::shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, v, requires_grad);
  }

  /// Build the result of an operation. The graph edge is recorded only when
  /// some input requires gradients.
  static Tensor from_op(Shape shape, std::vector<double> data, OpKind op,
                        std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = op;
    const bool any = detail::grad_mode_flag() && std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      out.node_->requires_grad = true;
      out.node_->inputs.reserve(inputs.size());
      for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::uint64_t id() const { return node_->id; }
  OpKind op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access; intended for optimizers, initializers and perturbation
  /// oracles operating on leaf tensors between passes.
  std::span<double> mutable_data() { return node_->data; }
  std::vector<double>& storage() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + detail::shape_str(shape()));
    return node_->data[0];
  }

  double operator[](std::size_t i) const { return node_->data[i]; }

  /// A leaf copy that does not participate in the graph.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  Node& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
inline Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

namespace detail {

/// Reverse topological order (outputs first) of every node reachable from
/// `root` that requires gradients.
inline std::vector<Node*> reverse_topological(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

}  // namespace detail

/// Back-propagate from a scalar loss. Gradients accumulate additively into
/// every tensor that requires them; the recorded graph is released afterwards.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  for (std::size_t e : loss.shape()) {
    if (e != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          detail::shape_str(loss.shape()));
    }
  }
  if (!loss.requires_grad()) return;
  auto order = detail::reverse_topological(&loss.node());
  loss.node().grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Edges may be the last owners of upstream nodes; keep them alive until
  // every node in `order` has been released.
  std::vector<NodePtr> release;
  for (Node* n : order) {
    for (auto& in : n->inputs) release.push_back(std::move(in));
    n->inputs.clear();
    n->backward_fn = nullptr;
  }
}

/// Every op kind reachable from `root` through recorded edges (including the root).
inline std::vector<OpKind> graph_ops(const Tensor& root) {
  std::vector<OpKind> ops;
  std::unordered_set<Node*> seen{&root.node()};
  std::vector<Node*> stack{&root.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    ops.push_back(n->op);
    for (auto& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  return ops;
}

}  // namespace aunet
