#pragma once

// Paired dataset, augmentation, Adam with a multi-step schedule, and the
// training loop.

#include "bsm/hierarchy.hpp"
#include "bsm/losses.hpp"
#include "bsm/model.hpp"
#include "bsm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bsm {

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 4.0e-4;
  Index batch_size = 2;
  Index crop_size = 64;
  Index iterations = 500;
  std::vector<double> milestones{0.5, 0.75, 0.9};
  double decay = 0.5;
  LossWeights loss;
  std::uint64_t seed = 0;
  int precision = 64;  // 32 or 64
  Index log_every = 50;
  /// Save a checkpoint when a milestone is reached, not only at the end.
  bool checkpoint_at_milestones = true;

  /// Throws ConfigError when an invariant fails.
  void validate() const;
  std::string to_text() const;
  /// Training and architecture keys together; unknown keys throw ConfigError.
  static TrainConfig from_entries(const std::map<std::string, std::string>& entries);
  static TrainConfig from_file(const std::filesystem::path& path);
  /// Applies `key=value` overrides on top of this configuration.
  TrainConfig with_overrides(const std::vector<std::string>& assignments) const;
};

struct PairedSample {
  std::string name;
  std::filesystem::path low_path, gt_path;
  Tensor<double> low, gt;  // [3, H, W]
  std::optional<InstanceMaskSet<double>> masks;
  std::optional<HierarchyMap<double>> external_score;  // <stem>.score.pgm next to the low image
};

struct PairedDataset {
  std::filesystem::path root;
  std::vector<PairedSample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Path of the optional external brightness score map of an image.
std::filesystem::path score_sidecar_path(const std::filesystem::path& image_path);

/// Pairs root/low/NAME.png with root/high/NAME.png, sorted by name. Throws
/// DatasetError naming any orphan or size mismatch, FormatError on bad PNGs.
PairedDataset load_dataset(const std::filesystem::path& root);

struct CropWindow {
  Index top = 0, left = 0, size = 0;
  bool flip_horizontal = false, flip_vertical = false;
};

CropWindow draw_crop(Index height, Index width, Index crop, Rng& rng);
/// Crops then flips a pair and its masks and score map with the same window.
PairedSample apply_crop(const PairedSample& sample, const CropWindow& window);
/// draw_crop + apply_crop. InputError when the image is smaller than the crop.
PairedSample augment(const PairedSample& sample, Rng& rng, Index crop);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Vector<Scalar>> m, v;
  Index step = 0;
};

/// One bias-corrected Adam update of every parameter from its gradient (a
/// missing gradient counts as zero). NumericError names a non-finite gradient.
template <typename Scalar>
void adam_step(NamedParameters<Scalar>& parameters, AdamState<Scalar>& state, double lr,
               const AdamOptions& options = {});

/// Learning rate at `iteration` (0-based): base * decay^k, k = milestones passed.
double scheduled_lr(const TrainConfig& config, Index iteration);

/// The iteration at which each milestone takes effect.
std::vector<Index> milestone_iterations(const TrainConfig& config);

/// Maps for one (cropped) sample: brightness from the scorer, semantic from
/// the masks or all-background.
template <typename Scalar>
std::pair<HierarchyMap<Scalar>, HierarchyMap<Scalar>> sample_maps(const Tensor<Scalar>& low,
                                                                  const PairedSample& sample,
                                                                  ScorerKind scorer);

struct TrainLogEntry {
  Index iteration = 0;  // 1-based
  double lr = 0;
  double loss = 0;      // mean over the window ending here
  double psnr = 0;      // mean train PSNR over the same window
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::string log_text;
  double final_psnr = 0;     // full images, mean over the dataset
  double baseline_psnr = 0;  // PSNR(low, gt), same averaging
  std::vector<double> losses;  // every iteration
};

/// Runs the training loop at the configured precision. When `checkpoint` is
/// non-empty it is written at milestones and at the end. `on_log` receives
/// every log line as it is produced.
TrainResult train(const TrainConfig& config, const PairedDataset& dataset,
                  const std::filesystem::path& checkpoint = {},
                  const std::function<void(const std::string&)>& on_log = {});

template <typename Scalar>
TrainResult train_model(BsmambaModel<Scalar>& model, const TrainConfig& config, const PairedDataset& dataset,
                        const std::filesystem::path& checkpoint = {},
                        const std::function<void(const std::string&)>& on_log = {});

}  // namespace bsm
