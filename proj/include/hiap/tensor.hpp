// Dense row-major tensors with a dynamically recorded reverse-mode graph.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hiap {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  leaf,
  matmul,
  add,
  broadcast_mul,
  gelu,
  softmax_lastdim,
  log_softmax_lastdim,
  layer_norm,
  reduce_mean,
  sum,
  sum_lastdim,
  relu,
  sigmoid,
  scale,
  transpose,
  reshape,
  slice,
  prepend_token,
  select_token,
  straight_through,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::broadcast_mul: return "broadcast_mul";
    case OpKind::gelu: return "gelu";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::log_softmax_lastdim: return "log_softmax_lastdim";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::sum: return "sum";
    case OpKind::sum_lastdim: return "sum_lastdim";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::prepend_token: return "prepend_token";
    case OpKind::select_token: return "select_token";
    case OpKind::straight_through: return "straight_through";
  }
  return "?";
}

[[noreturn]] inline void throw_shape_error(OpKind kind, const Shape& a, const Shape& b,
                                           const std::string& detail = {}) {
  std::string msg = std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) +
                    " and " + shape_str(b);
  if (!detail.empty()) msg += " (" + detail + ")";
  throw ShapeError(msg);
}

template <typename T>
class Tensor;

/// Per-thread switch for graph recording.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Backward closures receive the inputs and the output gradient; they must not
// capture the output tensor itself.
template <typename T>
using BackwardFn = std::function<void(const std::vector<Tensor<T>>&, std::span<const T>)>;

template <typename T>
struct Node {
  OpKind kind = OpKind::leaf;
  std::vector<Tensor<T>> inputs;
  BackwardFn<T> backward;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (hiap::numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    auto n = hiap::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    auto n = hiap::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return impl_->node == nullptr; }
  OpKind op() const { return impl_->node ? impl_->node->kind : OpKind::leaf; }

  /// Gradient buffer, allocated as zeros on first access.
  std::span<T> grad() const { return impl_->grad_buffer(); }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  void zero_grad() const { impl_->grad.assign(impl_->data.size(), T(0)); }

  /// Same data, detached from any graph.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(impl_->data.begin(), impl_->data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    Tensor<U> t(shape(), std::move(out));
    t.set_requires_grad(requires_grad());
    return t;
  }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl<T>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Creates the output of an op; records a node only when an input needs grad.
template <typename T>
Tensor<T> make_result(OpKind kind, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
#ifndef NDEBUG
  for (T v : out.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      bool inputs_finite = true;
      for (const auto& in : inputs)
        for (T x : in.data())
          if (!std::isfinite(static_cast<double>(x))) inputs_finite = false;
      if (inputs_finite)
        throw Error(std::string(op_name(kind)) + ": non-finite output from finite inputs");
      break;
    }
  }
#endif
  bool needs_grad = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                [](const Tensor<T>& t) { return t.requires_grad(); });
  if (needs_grad) {
    auto node = std::make_shared<detail::Node<T>>();
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.set_requires_grad(true);
  }
  return out;
}

/// Topologically ordered view of the ops reachable from a root tensor.
template <typename T>
class Graph {
 public:
  static Graph build(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<const detail::TensorImpl<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<detail::TensorImpl<T>*, std::size_t>> stack;
    if (root.defined() && root.impl()->node) stack.emplace_back(root.impl(), 0);
    seen.insert(root.impl());
    while (!stack.empty()) {
      auto& [impl, next] = stack.back();
      const auto& inputs = impl->node->inputs;
      if (next < inputs.size()) {
        auto* child = inputs[next++].impl();
        if (child->node && child->requires_grad && seen.insert(child).second)
          stack.emplace_back(child, 0);
        continue;
      }
      g.order_.push_back(impl);
      stack.pop_back();
    }
    return g;
  }

  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }
  const std::vector<detail::TensorImpl<T>*>& order() const { return order_; }

 private:
  std::vector<detail::TensorImpl<T>*> order_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
/// Leaf gradients accumulate across calls; interior gradients are reset.
template <typename T>
void backward(const Graph<T>& graph, const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw Error("backward: loss must be a scalar, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (graph.empty()) throw Error("backward: graph is empty (loss does not depend on any parameter)");
  for (auto* impl : graph.order()) impl->grad.assign(impl->data.size(), T(0));
  loss.impl()->grad[0] = T(1);
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    impl->node->backward(impl->node->inputs, impl->grad);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  backward(Graph<T>::build(loss), loss);
}

}  // namespace hiap
