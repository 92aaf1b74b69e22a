#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <utility>
#include <vector>

#include "skiplayer/common.hpp"
#include "skiplayer/rng.hpp"

namespace skiplayer {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

template <typename S>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
};

// Shared storage node; autodiff edges point at these.
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

// Thin handle with shared ownership; copying aliases the same storage.
// Values are treated as immutable once an op has produced them; grad is the
// only buffer mutated afterwards.
template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(numel_of(n->shape)), S(0));
    set_rg(*n, requires_grad);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.node_->value) x = v;
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
    SKL_CHECK_ARG(numel_of(shape) == static_cast<int64_t>(data.size()),
                  "tensor: data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    set_rg(*n, requires_grad);
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, RngStream& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.node_->value) x = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  static Tensor randu(Shape shape, RngStream& rng, double lo, double hi,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.node_->value)
      x = static_cast<S>(lo + (hi - lo) * rng.uniform());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t ndim() const { return node_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  // Constness of the handle does not protect the shared node, mirroring
  // shared_ptr semantics.
  S* data() const { return node_->value.data(); }
  S* value() const { return node_->value.data(); }
  S* grad() const { return node_->grad.data(); }

  std::vector<S>& values() const { return node_->value; }
  std::vector<S>& grads() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) const { set_rg(*node_, rg); }
  void zero_grad() const {
    if (node_->requires_grad)
      std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    SKL_CHECK(numel() == 1, "item(): tensor is not scalar, shape " +
                                shape_str(node_->shape));
    return node_->value[0];
  }

  // detached value copy
  Tensor clone_values() const {
    return Tensor::from(node_->shape, node_->value, false);
  }

  bool all_finite() const {
    for (S v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  static void set_rg(Node& n, bool rg) {
    n.requires_grad = rg;
    if (rg)
      n.grad.assign(n.value.size(), S(0));
    else
      n.grad.clear();
  }

  std::shared_ptr<Node> node_;
};

}  // namespace skiplayer
