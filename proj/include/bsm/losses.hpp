#pragma once

// Training objective and image quality metrics.
//
//   total = l1 * L1 + ssim * (1 - SSIM) + edge * BCE(soft_edge(pred), canny(gt))

#include "bsm/hierarchy.hpp"
#include "bsm/tensor.hpp"

#include <vector>

namespace bsm {

struct LossWeights {
  double l1 = 1.0;
  double ssim = 0.5;
  double edge = 0.1;

  /// Throws ConfigError on negative or non-finite weights.
  void validate() const;
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr int kEdgeBlurSize = 5;
inline constexpr double kEdgeBlurSigma = 1.4;
inline constexpr double kCannyLow = 0.1;
inline constexpr double kCannyHigh = 0.2;
inline constexpr double kBceFloor = 1e-6;
inline constexpr double kPsnrCap = 100.0;

/// Normalized size x size Gaussian window, row-major.
std::vector<double> gaussian_window(int size, double sigma);

/// Mean absolute difference.
template <typename Scalar>
Tensor<Scalar> l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);

/// Mean SSIM over valid 11x11 Gaussian windows and channels. Inputs
/// [C, H, W] or [B, C, H, W]; InputError when smaller than the window.
template <typename Scalar>
Tensor<Scalar> ssim(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);
template <typename Scalar>
Tensor<Scalar> ssim_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);

/// Differentiable edge strength in [0, 1]: luma, 5x5 Gaussian blur (sigma 1.4),
/// Sobel magnitude, divided by the per-image maximum. Returns [B, 1, H, W].
template <typename Scalar>
Tensor<Scalar> soft_edge(const Tensor<Scalar>& image);

/// Intermediate maps of the reference Canny detector.
struct CannyStages {
  Plane<double> magnitude;
  Plane<double> suppressed;  // magnitude after non-maximum suppression
  Plane<double> weak;        // suppressed >= low threshold
  Plane<double> edges;       // hysteresis result, {0, 1}
};

/// Canny on a grayscale plane in [0, 1]; thresholds are fractions of the
/// maximum gradient magnitude.
CannyStages canny_stages(const Plane<double>& gray, double low = kCannyLow, double high = kCannyHigh);
Plane<double> canny_reference(const Plane<double>& gray);
/// Per-image binary edges of [B, 1|3, H, W] (luma for RGB), as a constant [B, 1, H, W].
template <typename Scalar>
Tensor<Scalar> canny_reference(const Tensor<Scalar>& images);

/// Mean binary cross-entropy; log terms are floored at log(1e-6).
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy(const Tensor<Scalar>& prob, const Tensor<Scalar>& target);

/// BCE(soft_edge(pred), canny_reference(gt)); the gt side carries no gradient.
template <typename Scalar>
Tensor<Scalar> edge_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt);

template <typename Scalar>
struct LossBreakdown {
  Tensor<Scalar> total;
  Tensor<Scalar> l1;
  Tensor<Scalar> ssim;  // 1 - SSIM
  Tensor<Scalar> edge;
};

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt,
                                 const LossWeights& weights = {});

/// 10 log10(peak^2 / mse) over all elements, capped at 100 dB.
template <typename Scalar>
double psnr(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double peak = 1.0);

/// Pixel-exact F1 between binary edge maps; 1 when both are empty.
double edge_f1(const Plane<double>& predicted, const Plane<double>& truth);

}  // namespace bsm
