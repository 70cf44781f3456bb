#include "bsm/tensor.hpp"

#include "bsm/errors.hpp"

#include <sstream>
#include <unordered_set>

namespace bsm {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Vector<Scalar> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("buffer of " + std::to_string(data.size()) +
                         " scalars does not match shape " + shape_string(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, Vector<Scalar>::Zero(shape_numel(shape)), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value, bool requires_grad) {
  return Tensor(shape, Vector<Scalar>::Constant(shape_numel(shape), value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(const Shape& shape, const std::vector<Scalar>& values,
                                           bool requires_grad) {
  Vector<Scalar> v = Eigen::Map<const Vector<Scalar>>(values.data(),
                                                      static_cast<Index>(values.size()));
  return Tensor(shape, std::move(v), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Vector<Scalar>::Constant(1, value), requires_grad);
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int n = ndim();
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  return node_->shape[a];
}

template <typename Scalar>
Vector<Scalar>& Tensor<Scalar>::mutable_values() {
  if (!node_->is_leaf()) throw ContractError("cannot mutate the output of op '" + node_->op + "'");
  return node_->data;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1)
    throw ContractError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->data[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  const Shape& s = shape();
  if (index.size() != s.size())
    throw DimensionError("index rank " + std::to_string(index.size()) + " for shape " +
                         shape_string(s));
  Index flat = 0;
  std::size_t k = 0;
  for (Index i : index) {
    if (i < 0 || i >= s[k]) throw DimensionError("index out of range for shape " + shape_string(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->data[flat];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

template <typename Scalar>
void Tensor<Scalar>::backward(bool retain_graph) const {
  if (numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(shape()));
  if (!requires_grad()) throw ContractError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order of the tape. The order
  // holds owning pointers because releasing a node's inputs below may drop the
  // last other reference to a node not yet visited.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->inputs.size()) {
      std::shared_ptr<Node> child = top.first->inputs[top.second++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (node->is_leaf()) continue;
    if (node->backward && node->grad.size() != 0) node->backward(node->grad);
    if (!retain_graph) {
      node->grad.resize(0);
      node->backward = nullptr;
      node->inputs.clear();
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), values(), false);
}

template <typename Scalar>
Tensor<Scalar> uniform(const Shape& shape, Scalar lo, Scalar hi, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Vector<Scalar> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(shape, std::move(v), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> normal(const Shape& shape, Scalar mean, Scalar stddev, Rng& rng,
                      bool requires_grad) {
  std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
  Vector<Scalar> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(shape, std::move(v), requires_grad);
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> uniform(const Shape&, float, float, Rng&, bool);
template Tensor<double> uniform(const Shape&, double, double, Rng&, bool);
template Tensor<float> normal(const Shape&, float, float, Rng&, bool);
template Tensor<double> normal(const Shape&, double, double, Rng&, bool);

}  // namespace bsm
