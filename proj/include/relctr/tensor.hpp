#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "relctr/errors.hpp"
#include "relctr/rng.hpp"

namespace relctr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value when grad-carrying
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, accumulates into parents' grad.
  std::function<void(const Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

// Dense row-major float64 tensor, rank <= 2 in practice. A Tensor is a cheap
// handle onto an immutable-after-forward node; sharing one across consumers
// makes gradients accumulate.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_size(shape) != values.size())
      throw InputError("tensor: shape does not match value count");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->id = detail::next_node_id();
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1, 1}, {v}, requires_grad);
  }

  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    Shape s{1, values.size()};
    return from(std::move(s), std::move(values), requires_grad);
  }

  static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = stddev * rng.gaussian();
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t rows() const { return n_->shape.empty() ? 0 : n_->shape[0]; }
  std::size_t cols() const {
    return n_->shape.size() < 2 ? (n_->shape.empty() ? 0 : 1) : n_->shape[1];
  }
  bool requires_grad() const { return n_->requires_grad; }

  const std::vector<double>& values() const { return n_->value; }
  // Mutable access for parameter updates; never call on interior graph nodes.
  std::vector<double>& mutable_values() { return n_->value; }

  const std::vector<double>& grad() const {
    const_cast<detail::Node*>(n_.get())->ensure_grad();
    return n_->grad;
  }

  double at(std::size_t i) const { return n_->value.at(i); }
  double operator()(std::size_t r, std::size_t c) const {
    return n_->value[r * cols() + c];
  }

  double item() const {
    if (size() != 1) throw InputError("tensor: item() on non-scalar");
    return n_->value[0];
  }

  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  bool all_finite() const {
    for (double v : n_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// Reverse accumulation record. Construction walks the graph below a scalar
// loss and freezes the reachable grad-carrying operations in reverse
// topological order (creation ids are ascending parent-to-child, so sorted
// ids are a topological order). run() visits each recorded op exactly once.
class GradTape {
 public:
  explicit GradTape(const Tensor& loss) : loss_(loss.node()) {
    if (!loss_ || loss_->value.size() != 1)
      throw InputError("backward: loss must be a defined scalar tensor");
    if (!loss_->requires_grad) return;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::Node*> stack{loss_.get()};
    seen.insert(loss_.get());
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      order_.push_back(n);
      for (const auto& p : n->parents) {
        if (p->id >= n->id)
          throw std::logic_error("backward: cycle detected in tape");
        if (p->requires_grad && seen.insert(p.get()).second)
          stack.push_back(p.get());
      }
    }
    std::sort(order_.begin(), order_.end(),
              [](const detail::Node* a, const detail::Node* b) {
                return a->id > b->id;
              });
  }

  std::size_t recorded_ops() const {
    std::size_t k = 0;
    for (const detail::Node* n : order_)
      if (n->backprop) ++k;
    return k;
  }

  void run() {
    if (order_.empty()) return;
    for (detail::Node* n : order_) n->ensure_grad();
    loss_->grad[0] += 1.0;
    for (detail::Node* n : order_)
      if (n->backprop) n->backprop(*n);
  }

 private:
  std::shared_ptr<detail::Node> loss_;
  std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& loss) { GradTape(loss).run(); }

}  // namespace relctr
