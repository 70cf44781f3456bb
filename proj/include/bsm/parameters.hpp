#pragma once

// Named-parameter plumbing shared by the model parts. Each part exposes
//   template <typename F> void visit(const std::string& prefix, F&& f)
// calling f(name, tensor&) for every trainable tensor in a fixed order.

#include "bsm/errors.hpp"
#include "bsm/tensor.hpp"

#include <string>

namespace bsm {

template <typename Scalar, typename Module>
NamedParameters<Scalar> collect_parameters(Module& module, const std::string& prefix = "") {
  NamedParameters<Scalar> out;
  module.visit(prefix, [&](const std::string& name, Tensor<Scalar>& t) { out.emplace_back(name, t); });
  return out;
}

/// Points every tensor of `module` at the same-named entry of `source`.
/// Throws CheckpointError on a missing name or a shape mismatch.
template <typename Scalar, typename Module>
void assign_parameters(Module& module, const NamedParameters<Scalar>& source,
                       const std::string& prefix = "") {
  module.visit(prefix, [&](const std::string& name, Tensor<Scalar>& t) {
    for (const auto& [n, value] : source)
      if (n == name) {
        if (t.defined() && value.shape() != t.shape())
          throw CheckpointError("tensor '" + name + "' has shape " + shape_string(value.shape()) +
                                ", architecture expects " + shape_string(t.shape()));
        t = value;
        return;
      }
    throw CheckpointError("missing tensor '" + name + "'");
  });
}

}  // namespace bsm
