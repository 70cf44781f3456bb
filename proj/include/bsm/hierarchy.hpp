#pragma once

// Brightness and semantic hierarchy maps and the token orderings they induce.
//
// A hierarchy map assigns every pixel a score in [0, 1]. Sorting the raster
// order of the token grid by that score (stable, ascending) yields a SortPlan;
// the scan then visits tokens of similar brightness, or of the same object
// instance, consecutively and the inverse index puts them back.

#include "bsm/ops.hpp"
#include "bsm/tensor.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bsm {

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class MapKind { brightness, semantic };

enum class ScorerKind { luma, histogram, external };

std::string to_string(ScorerKind kind);
/// Parses "luma", "histogram" or "external"; throws ConfigError otherwise.
ScorerKind parse_scorer(const std::string& name);

template <typename Scalar>
struct HierarchyMap {
  Plane<Scalar> values;
  MapKind kind = MapKind::brightness;
  std::string source;

  Index height() const { return values.rows(); }
  Index width() const { return values.cols(); }
};

struct SortPlan {
  Permutation forward_index;  // token order after the sort
  Permutation inverse_index;  // inverse_index[forward_index[i]] == i
  std::vector<double> key_snapshot;

  Index size() const { return static_cast<Index>(forward_index.size()); }
  bool operator==(const SortPlan&) const = default;
};

/// Instance masks with confidences; the background is 1 - max_i M_i.
template <typename Scalar>
struct InstanceMaskSet {
  Index height = 0;
  Index width = 0;
  std::vector<Plane<Scalar>> instance_maps;
  std::vector<Scalar> scores;

  Index count() const { return static_cast<Index>(instance_maps.size()); }
  Plane<Scalar> background() const;
  /// Throws InputError when a mask or score leaves [0, 1] or shapes disagree.
  void validate() const;
  /// All-background set (n = 0).
  static InstanceMaskSet empty(Index height, Index width);
};

/// BT.601 luma of an RGB image [3, H, W] in [0, 1].
template <typename Scalar>
HierarchyMap<Scalar> luma_score(const Tensor<Scalar>& image);

/// Empirical CDF of the luma histogram evaluated at each pixel's bin.
template <typename Scalar>
HierarchyMap<Scalar> histogram_score(const Tensor<Scalar>& image, int bins = 256);

/// n + 1 grading ranges [i/(n+1), (i+1)/(n+1)], index 0 being the background.
std::vector<std::pair<double, double>> grading_ranges(Index instance_count);

/// Semantic attention map. Instances are ranked by ascending confidence (ties
/// by list order); a pixel covered by instance rank i (1-based) with mask value
/// m and score S maps to (i + clamp(m*S, 0, 1)) / (n+1), overlaps take the
/// highest rank, pure background maps to 0.5 / (n+1).
template <typename Scalar>
HierarchyMap<Scalar> semantic_map(const InstanceMaskSet<Scalar>& masks);

/// Stable ascending argsort of the raster-order scores.
template <typename Scalar>
SortPlan build_sort_plan(const HierarchyMap<Scalar>& map);

/// Area-average pooling by integer factors.
template <typename Scalar>
HierarchyMap<Scalar> downsample_map(const HierarchyMap<Scalar>& map, Index target_height,
                                    Index target_width);

/// Brightness map from the configured scorer. `external` needs `external_map`.
template <typename Scalar>
HierarchyMap<Scalar> brightness_map(const Tensor<Scalar>& image, ScorerKind scorer,
                                    const HierarchyMap<Scalar>* external_map = nullptr);

// Mask sidecar files next to `name.png`:
//   name.inst.pgm         16-bit label map, 0 = background, k = instance k
//   name.inst.txt         one "<id> <confidence>" line per instance, ids 1..n
//   name.inst.<id>.pgm    optional 8-bit soft mask, value / 255
struct MaskSidecarPaths {
  std::filesystem::path labels;
  std::filesystem::path scores;
};

MaskSidecarPaths sidecar_paths(const std::filesystem::path& image_path);
bool has_mask_sidecar(const std::filesystem::path& image_path);

/// Reads and validates the sidecar of `image_path`. Throws DatasetError on any
/// inconsistency (ids not contiguous, label/score count mismatch, confidence
/// out of range, shape mismatch with the expected size when given).
InstanceMaskSet<double> load_mask_sidecar(const std::filesystem::path& image_path,
                                          std::optional<std::pair<Index, Index>> expected_size = {});

/// Writes the sidecar for `image_path` from a label map and confidences.
void write_mask_sidecar(const std::filesystem::path& image_path, const Plane<int>& labels,
                        const std::vector<double>& confidences);

/// Score map stored as a grayscale PGM (8 or 16 bit), value / maxval.
HierarchyMap<double> load_score_map(const std::filesystem::path& path);
void save_score_map(const HierarchyMap<double>& map, const std::filesystem::path& path);

}  // namespace bsm
