#pragma once

// Internal helper for defining differentiable ops.

#include "bsm/errors.hpp"
#include "bsm/tensor.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace bsm::detail {

template <typename Scalar>
using NodePtr = std::shared_ptr<TensorNode<Scalar>>;

template <typename Scalar>
void ensure_finite(const std::string& op, const Vector<Scalar>& data) {
  if (!data.allFinite()) throw NumericError("op '" + op + "' produced a non-finite value");
}

/// Wraps a freshly computed buffer into a tensor and, if any input requires a
/// gradient, attaches the backward closure. The closure receives the upstream
/// gradient and accumulates into the inputs' grad buffers.
template <typename Scalar, typename Backward>
Tensor<Scalar> record(std::string op, Shape shape, Vector<Scalar> data,
                      std::vector<NodePtr<Scalar>> inputs, Backward&& backward) {
  ensure_finite(op, data);
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> constant(std::string op, Shape shape, Vector<Scalar> data) {
  ensure_finite(op, data);
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  return Tensor<Scalar>(std::move(node));
}

}  // namespace bsm::detail

#define BSM_INSTANTIATE_FOR_SCALARS(MACRO) \
  MACRO(float)                             \
  MACRO(double)
