#pragma once

// Inference on whole images of any size, image enhancement to files, and
// dataset evaluation.

#include "bsm/hierarchy.hpp"
#include "bsm/model.hpp"
#include "bsm/tensor.hpp"
#include "bsm/train.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace bsm {

/// Smallest power of two >= max(n, 16).
Index padded_extent(Index n);

/// Reflect-pads a [C, H, W] image on the bottom and right to height x width.
template <typename Scalar>
Tensor<Scalar> pad_image(const Tensor<Scalar>& image, Index height, Index width);
template <typename Scalar>
Plane<Scalar> pad_plane(const Plane<Scalar>& plane, Index height, Index width);

struct Enhancement {
  Tensor<double> output;  // [3, H, W], the input size
  HierarchyMap<double> brightness, semantic;  // input size
  Plane<double> brightness_order, semantic_order;  // visit position / (L - 1), input size
  Index scans = 0;  // hierarchy scans of the forward pass
};

/// Runs the model on one full image: maps, reflect padding to power-of-two
/// extents, forward, crop back. Masks and the external score come from the sample.
template <typename Scalar>
Enhancement enhance_sample(const BsmambaModel<Scalar>& model, const PairedSample& sample);

struct EnhanceOptions {
  bool dump_maps = false;
};

/// Enhances one PNG or every PNG in a directory, writing `<name>.enhanced.png`
/// (and the map dumps) to out_dir. Returns the written files. `warn` receives
/// non-fatal notices such as a missing mask sidecar.
std::vector<std::filesystem::path> enhance_files(const BsmambaModel<double>& model, const std::filesystem::path& input,
                                                 const std::filesystem::path& out_dir, const EnhanceOptions& options,
                                                 const std::function<void(const std::string&)>& warn = {});

struct EvalRow {
  std::string name;
  double psnr = 0;
  double ssim = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0;
  double mean_ssim = 0;
  Index scans_per_forward = 0;

  std::string table() const;
  std::string csv() const;
};

template <typename Scalar>
EvalReport evaluate(const BsmambaModel<Scalar>& model, const PairedDataset& dataset);

/// PSNR and SSIM of the low images themselves against gt (no model).
EvalReport evaluate_identity(const PairedDataset& dataset);

}  // namespace bsm
