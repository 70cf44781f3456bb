#pragma once

// Detail enhancement network: a small encoder/decoder with Fourier
// convolution blocks in the bottleneck, refining an image residually.

#include "bsm/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace bsm {

template <typename Scalar>
struct FfcBlockWeights {
  Index local_channels = 0;
  Index global_channels = 0;
  Tensor<Scalar> l2l_w, l2l_b;    // 3x3 spatial conv on the local part
  Tensor<Scalar> g2l_w;           // 1x1 global -> local
  Tensor<Scalar> l2g_w;           // 1x1 local -> global
  Tensor<Scalar> spec_w, spec_b;  // 1x1 over stacked real/imag planes [2Cg, 2Cg, 1, 1]

  /// alpha is the fraction of channels routed to the spectral branch.
  static FfcBlockWeights init(Index channels, double alpha, Rng& rng);
  /// Spectral conv set to the identity (real to real, imaginary to imaginary), zero bias.
  void set_identity_spectral();

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "l2l.w", l2l_w);
    f(prefix + "l2l.b", l2l_b);
    f(prefix + "g2l.w", g2l_w);
    f(prefix + "l2g.w", l2g_w);
    f(prefix + "spec.w", spec_w);
    f(prefix + "spec.b", spec_b);
  }
};

/// rfft2 -> 1x1 conv over [real; imag] channels -> irfft2. x: [B, Cg, H, W].
template <typename Scalar>
Tensor<Scalar> ffc_spectral_branch(const Tensor<Scalar>& x, const FfcBlockWeights<Scalar>& w);

/// Channel split, spatial and spectral branches cross-mixed, gelu, residual add.
template <typename Scalar>
Tensor<Scalar> ffc_block(const Tensor<Scalar>& x, const FfcBlockWeights<Scalar>& w);

struct DenetConfig {
  Index width = 16;  // channels at full resolution; 2x and 4x after each downsampling
  Index ffc_blocks = 2;
  double alpha = 0.5;

  void validate() const;
};

template <typename Scalar>
struct DenetWeights {
  DenetConfig config;
  Tensor<Scalar> enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b;
  std::vector<FfcBlockWeights<Scalar>> ffc;
  Tensor<Scalar> dec2_w, dec2_b, dec1_w, dec1_b;
  Tensor<Scalar> out_w, out_b;  // zero at init

  static DenetWeights init(const DenetConfig& config, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "enc1.w", enc1_w);
    f(prefix + "enc1.b", enc1_b);
    f(prefix + "enc2.w", enc2_w);
    f(prefix + "enc2.b", enc2_b);
    f(prefix + "enc3.w", enc3_w);
    f(prefix + "enc3.b", enc3_b);
    for (std::size_t i = 0; i < ffc.size(); ++i) ffc[i].visit(prefix + "ffc" + std::to_string(i) + ".", f);
    f(prefix + "dec2.w", dec2_w);
    f(prefix + "dec2.b", dec2_b);
    f(prefix + "dec1.w", dec1_w);
    f(prefix + "dec1.b", dec1_b);
    f(prefix + "out.w", out_w);
    f(prefix + "out.b", out_b);
  }
};

/// Stage name and output shape, in execution order.
using StageTrace = std::vector<std::pair<std::string, Shape>>;

/// clamp(image + residual, 0, 1). H and W must be divisible by 4 (InputError),
/// and H/4, W/4 powers of two for the spectral branch.
template <typename Scalar>
Tensor<Scalar> denet_forward(const Tensor<Scalar>& image, const DenetWeights<Scalar>& weights,
                             StageTrace* trace = nullptr);

}  // namespace bsm
