#pragma once

// Dense NCHW tensor with reverse-mode gradient recording.
//
// Every op that has at least one input requiring a gradient records a Node
// on its output. Nodes carry a monotonically increasing id, so walking the
// reachable nodes in descending id order is a valid reverse topological
// order. That walk is the tape.

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
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace wricnet {

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class AutodiffError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T> struct TensorImpl;

template <class T> struct Node {
  std::uint64_t id = next_node_id();
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the output whose grad is complete; accumulates into inputs.
  std::function<void(const TensorImpl<T>&)> backward;
  bool consumed = false;
  const char* name = "";
};

template <class T> struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool grad_populated = false; // written by backward() since the last zero_grad()
  std::shared_ptr<Node<T>> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

} // namespace detail

/// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T> class Tensor {
public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (values.size() != shape.numel())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    impl_->shape = shape;
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
    if (requires_grad) impl_->ensure_grad();
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(shape.numel(), value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(shape, T(1), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return full({1, 1, 1, 1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Leaf tensors only: parameters are updated in place by optimizers and loaders.
  std::span<T> mutable_data() {
    if (impl_->node) throw AutodiffError("cannot mutate a tensor produced by a recorded op");
    return impl_->data;
  }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  bool has_grad() const { return impl_->requires_grad && impl_->grad_populated; }
  std::span<const T> grad() const {
    if (!impl_->requires_grad) throw AutodiffError("tensor does not require grad");
    return impl_->grad;
  }
  std::span<T> mutable_grad() {
    if (!impl_->requires_grad) throw AutodiffError("tensor does not require grad");
    impl_->ensure_grad();
    impl_->grad_populated = true;
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->requires_grad) return;
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    impl_->grad_populated = false;
  }

  bool is_leaf() const { return !impl_->node; }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <class T> bool any_requires_grad(std::initializer_list<const Tensor<T>*> xs) {
  if (!grad_enabled()) return false;
  for (const auto* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

/// Builds an output tensor; if recording, attaches a node with the given inputs.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const TensorImpl<T>&)> backward, const char* name) {
  bool record = false;
  if (grad_enabled())
    for (const auto& in : inputs)
      if (in.requires_grad()) record = true;
  Tensor<T> out(shape, std::move(values), record);
  if (record) {
    auto node = std::make_shared<Node<T>>();
    node->name = name;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

/// Grad buffer of an input if it participates in backward, else nullptr.
template <class T> T* grad_of(const std::shared_ptr<TensorImpl<T>>& in) {
  if (!in->requires_grad) return nullptr;
  in->ensure_grad();
  in->grad_populated = true;
  return in->grad.data();
}

} // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf grads accumulate; the recorded
/// graph is consumed and may not be swept again.
template <class T> void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw AutodiffError("backward() requires a scalar loss");
  if (!loss.requires_grad() || !loss.impl()->node)
    throw AutodiffError("backward() requires a loss produced by a recorded forward pass");

  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<const Impl*> seen;
  std::vector<Impl*> stack{loss.impl().get()};
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    Impl* cur = stack.back();
    stack.pop_back();
    if (!cur->node) continue;
    if (cur->node->consumed)
      throw AutodiffError("stale tape: backward() already ran over this graph; rerun forward");
    order.push_back(cur);
    for (const auto& in : cur->node->inputs)
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Impl* a, const Impl* b) { return a->node->id > b->node->id; });

  for (Impl* impl : order)
    if (impl != loss.impl().get()) impl->grad.assign(impl->data.size(), T(0));
  loss.impl()->grad.assign(1, T(1));

  for (Impl* impl : order) {
    impl->node->backward(*impl);
    impl->node->consumed = true;
  }
}

} // namespace wricnet
