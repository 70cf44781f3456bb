#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include "bsm/hierarchy.hpp"
#include "bsm/image_io.hpp"
#include "bsm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace bsm::testing {

using T = Tensor<double>;

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||) between the
/// autodiff gradient and central differences of `loss` over sampled entries
/// of every leaf. Leaves are perturbed in place, so `loss` must rebuild its
/// graph from them on every call.
inline double gradient_error(const std::function<T()>& loss, std::vector<T> leaves, double h = 1e-5,
                             Index samples_per_leaf = 0, std::uint64_t seed = 11) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  loss().backward();
  std::mt19937_64 rng(seed);
  double diff2 = 0, analytic2 = 0, numeric2 = 0;
  for (auto& leaf : leaves) {
    const Vector<double> analytic =
        leaf.has_grad() ? Vector<double>(leaf.grad()) : Vector<double>::Zero(leaf.numel());
    std::vector<Index> picks(static_cast<std::size_t>(leaf.numel()));
    for (Index i = 0; i < leaf.numel(); ++i) picks[i] = i;
    if (samples_per_leaf > 0 && samples_per_leaf < leaf.numel()) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(static_cast<std::size_t>(samples_per_leaf));
    }
    for (Index i : picks) {
      double& v = leaf.mutable_values()[i];
      const double keep = v;
      v = keep + h;
      const double up = loss().item();
      v = keep - h;
      const double down = loss().item();
      v = keep;
      const double numeric = (up - down) / (2 * h);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      analytic2 += analytic[i] * analytic[i];
      numeric2 += numeric * numeric;
    }
    leaf.zero_grad();
  }
  const double scale = std::sqrt(std::max(analytic2, numeric2));
  return scale == 0 ? 0 : std::sqrt(diff2) / scale;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("bsm_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Smooth colour pattern with a bright disk, in [0, 1], shape [3, size, size].
inline T synthetic_gt(Index size, int variant) {
  Vector<double> v(3 * size * size);
  const double cx = size * (variant % 2 ? 0.35 : 0.6), cy = size * (variant % 2 ? 0.6 : 0.4);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double u = double(x) / size, w = double(y) / size;
        double value = 0.35 + 0.25 * std::sin(6.0 * u + 2.0 * c + variant) * std::cos(4.0 * w - c);
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < 0.04 * size * size) value = 0.9 - 0.1 * c;
        v[(c * size + y) * size + x] = std::clamp(value, 0.0, 1.0);
      }
  return quantize_8bit(T({3, size, size}, v));
}

/// Under-exposed rendition of a gt image: 0.15 * gt^1.3.
inline T synthetic_low(const T& gt) {
  return quantize_8bit(T(gt.shape(), (0.15 * gt.values().array().pow(1.3)).matrix()));
}

/// Writes `count` pairs as root/low/pK.png and root/high/pK.png.
inline void write_synthetic_dataset(const std::filesystem::path& root, int count, Index size) {
  std::filesystem::create_directories(root / "low");
  std::filesystem::create_directories(root / "high");
  for (int k = 0; k < count; ++k) {
    const T gt = synthetic_gt(size, k);
    const std::string name = "p" + std::to_string(k) + ".png";
    write_png(root / "high" / name, gt);
    write_png(root / "low" / name, synthetic_low(gt));
  }
}

inline double max_abs_diff(const T& a, const T& b) {
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

}  // namespace bsm::testing
