#pragma once

// Selective state-space scan over token sequences [B, L, C].
//
// Per channel c and state n:
//   h_t = exp(delta_t * A) h_{t-1} + delta_t B_t x_t,   y_t = C_t . h_t + D x_t
// with A = -exp(log_a) < 0, delta = softplus(x W_delta + b_delta) and
// B_t = x_t W_b, C_t = x_t W_c shared across channels.

#include "bsm/ops.hpp"
#include "bsm/tensor.hpp"

#include <array>
#include <string>

namespace bsm {

/// Number of 1-D scan traversals executed during one forward pass.
struct ScanCounter {
  Index scans = 0;
  void reset() { scans = 0; }
};

template <typename Scalar>
struct SsmParams {
  Tensor<Scalar> log_a;    // [C, N]
  Tensor<Scalar> w_delta;  // [C, C]
  Tensor<Scalar> b_delta;  // [C]
  Tensor<Scalar> w_b;      // [C, N]
  Tensor<Scalar> w_c;      // [C, N]
  Tensor<Scalar> d;        // [C]

  Index channels() const { return d.dim(0); }
  Index state_dim() const { return log_a.dim(1); }

  /// log_a = log(n + 1), step sizes log-uniform in [1e-3, 1e-1], D = 1.
  static SsmParams init(Index channels, Index state_dim, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "log_a", log_a);
    f(prefix + "w_delta", w_delta);
    f(prefix + "b_delta", b_delta);
    f(prefix + "w_b", w_b);
    f(prefix + "w_c", w_c);
    f(prefix + "d", d);
  }
};

/// Fused recurrence. x, delta: [B, L, C]; a: [C, N] (negative); b, c: [B, L, N]; skip: [C].
/// Differentiable in every argument.
template <typename Scalar>
Tensor<Scalar> selective_scan_kernel(const Tensor<Scalar>& x, const Tensor<Scalar>& delta,
                                     const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                                     const Tensor<Scalar>& c, const Tensor<Scalar>& skip);

/// Projections plus the fused recurrence; counts one traversal.
template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const SsmParams<Scalar>& params,
                              ScanCounter* counter = nullptr);

/// Straightforward scalar-loop evaluation of the same map, no autodiff.
template <typename Scalar>
Tensor<Scalar> selective_scan_oracle(const Tensor<Scalar>& x, const SsmParams<Scalar>& params);

/// Token orders of the four fixed directions on an H x W grid:
/// row-major, reversed row-major, column-major, reversed column-major.
std::array<Permutation, 4> ss2d_orders(Index height, Index width);

/// Four directional scans over raster-order tokens [B, H*W, C], summed.
template <typename Scalar>
Tensor<Scalar> ss2d_tokens(const Tensor<Scalar>& tokens, Index height, Index width,
                           const std::array<SsmParams<Scalar>, 4>& params,
                           ScanCounter* counter = nullptr);

/// ss2d_tokens on a spatial map [B, C, H, W].
template <typename Scalar>
Tensor<Scalar> ss2d_vanilla(const Tensor<Scalar>& x, const std::array<SsmParams<Scalar>, 4>& params,
                            ScanCounter* counter = nullptr);

}  // namespace bsm
