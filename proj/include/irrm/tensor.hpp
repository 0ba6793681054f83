#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "irrm/error.hpp"

namespace irrm {

/// Dense NCHW extent.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool differentiable = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require it.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// True while operations record a tape.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense 4-D array of T in NCHW row-major order with optional gradient
/// tracking. Copies share storage; values are never modified by operations.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : Tensor() {
    node_->shape = shape;
    node_->value.assign(shape.numel(), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor() {
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    }
    node_->shape = shape;
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
  static Tensor ones(Shape shape) { return Tensor(shape, T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(shape, v); }
  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  const char* op() const { return node_->op; }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return node_->value[((n * s.c + c) * s.h + h) * s.w + w];
  }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Marks a leaf as a trainable parameter.
  Tensor& set_requires_grad(bool on = true) {
    if (!node_->is_leaf()) throw Error("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  std::span<T> mutable_grad() { return node_->grad; }

  /// Parameter storage for in-place optimizer updates; leaves only.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw Error("mutable_data() on a non-leaf tensor");
    return node_->value;
  }

  /// Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(node_->value.begin(), node_->value.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }

  /// Builds the result of an operation, recording it on the tape when any
  /// input requires a gradient and recording is enabled.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op,
                        std::initializer_list<const Tensor*> inputs,
                        std::function<void(detail::Node<T>&)> backward_fn,
                        bool differentiable = true) {
    Tensor out(shape, std::move(values));
    out.node_->op = op;
    if (!grad_enabled()) return out;
    bool track = false;
    for (const Tensor* in : inputs) track = track || in->requires_grad();
    if (!track) return out;
    out.node_->requires_grad = true;
    out.node_->differentiable = differentiable;
    for (const Tensor* in : inputs) out.node_->inputs.push_back(in->node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  /// Same as from_op with a runtime list of inputs.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op,
                        const std::vector<Tensor>& inputs,
                        std::function<void(detail::Node<T>&)> backward_fn) {
    Tensor out(shape, std::move(values));
    out.node_->op = op;
    if (!grad_enabled()) return out;
    bool track = false;
    for (const Tensor& in : inputs) track = track || in.requires_grad();
    if (!track) return out;
    out.node_->requires_grad = true;
    for (const Tensor& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  NodePtr node_;
};

/// Adds `g` into the gradient of `node` when it participates in differentiation.
template <class T>
void accumulate_grad(detail::Node<T>& node, std::span<const T> g) {
  if (!node.requires_grad) return;
  auto& buf = node.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed each time.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + loss.shape().str());
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion.
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<const NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->is_leaf()) continue;
    if (!node->differentiable) {
      throw Error(std::string("backward through non-differentiable op '") + node->op + "'");
    }
    node->backward_fn(*node);
  }
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace irrm
