#pragma once

// Dense N-d tensor with a dynamically recorded tape for reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared TensorNode. Ops never mutate their
// inputs; each op allocates a fresh node, and when any input requires a
// gradient the node keeps its inputs plus a backward closure. Calling
// backward() on a scalar walks the tape once in reverse topological order.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace bsm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Vector<Scalar> data;
  Vector<Scalar> grad;  // size 0 until a gradient arrives
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(const Vector<Scalar>&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  /// Gradient buffer, zero-initialized on first use.
  Vector<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Vector<Scalar>::Zero(data.size());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;
  using scalar_type = Scalar;

  Tensor() = default;
  Tensor(Shape shape, Vector<Scalar> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, const std::vector<Scalar>& values,
                            bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  /// Size along `axis`; negative axes count from the back.
  Index dim(int axis) const;
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Index numel() const { return node_->data.size(); }

  const Vector<Scalar>& values() const { return node_->data; }
  /// Writable storage; only leaves may be mutated (optimizers, initializers).
  Vector<Scalar>& mutable_values();
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() != 0; }
  const Vector<Scalar>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  /// Reverse-mode sweep from this scalar. Interior nodes release their
  /// closures and gradients afterwards unless `retain_graph` is set.
  void backward(bool retain_graph = false) const;
  /// Same data, no history, no gradient requirement.
  Tensor detach() const;
  const std::string& op_name() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), t.values().template cast<To>());
}

/// Number of scalars over a set of parameter tensors.
template <typename Scalar>
Index count_scalars(const std::vector<std::pair<std::string, Tensor<Scalar>>>& params) {
  Index n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

template <typename Scalar>
using NamedParameters = std::vector<std::pair<std::string, Tensor<Scalar>>>;

using Rng = std::mt19937_64;

template <typename Scalar>
Tensor<Scalar> uniform(const Shape& shape, Scalar lo, Scalar hi, Rng& rng,
                       bool requires_grad = false);
template <typename Scalar>
Tensor<Scalar> normal(const Shape& shape, Scalar mean, Scalar stddev, Rng& rng,
                      bool requires_grad = false);

}  // namespace bsm
