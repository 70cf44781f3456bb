#pragma once

// Differentiable free functions over Tensor<Scalar>. Every op validates its
// shapes (DimensionError naming the shapes involved), rejects non-finite
// results (NumericError naming the op) and records a backward closure when an
// input requires a gradient.

#include "bsm/tensor.hpp"

#include <vector>

namespace bsm {

using Permutation = std::vector<Index>;

/// Broadcast result shape under trailing-dimension alignment.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Elementwise binary ops with broadcasting.
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar> Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s);
template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar s);
template <typename Scalar> Tensor<Scalar> neg(const Tensor<Scalar>& x);

// Elementwise unary ops.
template <typename Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& x);
/// Throws DomainError on a non-positive entry.
template <typename Scalar> Tensor<Scalar> log(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> silu(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> softplus(const Tensor<Scalar>& x);
/// Exact (erf-based) GELU.
template <typename Scalar> Tensor<Scalar> gelu(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> abs(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> square(const Tensor<Scalar>& x);
/// Throws DomainError on a negative entry.
template <typename Scalar> Tensor<Scalar> sqrt(const Tensor<Scalar>& x);
/// Gradient passes where lo <= x <= hi.
template <typename Scalar> Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi);

// Reductions. The axis forms accept negative axes.
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis, bool keepdim = false);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis, bool keepdim = false);
/// Maximum along an axis; ties route the gradient to the first maximum.
template <typename Scalar> Tensor<Scalar> max(const Tensor<Scalar>& x, int axis, bool keepdim = false);

// Shape manipulation.
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape);
template <typename Scalar> Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& dims);
template <typename Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& x, int dim0, int dim1);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& x, const std::vector<Index>& sizes, int axis);

// Linear algebra.
/// [M,K]x[K,N], [B,M,K]x[K,N] or [B,M,K]x[B,K,N].
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// x[..., in] * weight[in, out] + bias[out]; `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias = {});

// Spatial ops on [B, C, H, W].
/// Cross-correlation with zero padding; weight is [Cout, Cin, kh, kw], bias [Cout] or undefined.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias = {}, Index stride = 1, Index pad = 0);
/// Mirror padding without edge repetition (pad < H and pad < W).
template <typename Scalar> Tensor<Scalar> pad_reflect(const Tensor<Scalar>& x, Index pad);
template <typename Scalar> Tensor<Scalar> upsample_nearest2x(const Tensor<Scalar>& x);

/// [B, C, H, W] -> [B, H*W, C], raster order.
template <typename Scalar> Tensor<Scalar> to_tokens(const Tensor<Scalar>& x);
/// [B, H*W, C] -> [B, C, H, W].
template <typename Scalar> Tensor<Scalar> from_tokens(const Tensor<Scalar>& x, Index height, Index width);

// Token reordering on [B, L, C].
/// Throws PermutationError unless `perm` is a permutation of 0..length-1.
void validate_permutation(const Permutation& perm, Index length);
Permutation invert_permutation(const Permutation& perm);
/// out[b, i, c] = x[b, perm[i], c]. One permutation for all batch entries.
template <typename Scalar> Tensor<Scalar> gather_tokens(const Tensor<Scalar>& x, const Permutation& perm);
/// Per-batch permutations (one per batch entry).
template <typename Scalar>
Tensor<Scalar> gather_tokens(const Tensor<Scalar>& x, const std::vector<Permutation>& perms);
/// Restores raster order from a sorted sequence: out[b, i, c] = x[b, inverse[i], c].
template <typename Scalar>
Tensor<Scalar> scatter_tokens(const Tensor<Scalar>& x, const Permutation& inverse);
template <typename Scalar>
Tensor<Scalar> scatter_tokens(const Tensor<Scalar>& x, const std::vector<Permutation>& inverses);

/// Normalizes over the last axis (epsilon 1e-5), then applies gamma/beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta);
inline constexpr double kLayerNormEpsilon = 1e-5;

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return neg(a); }

}  // namespace bsm
