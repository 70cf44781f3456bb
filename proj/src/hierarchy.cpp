#include "bsm/hierarchy.hpp"

#include "bsm/errors.hpp"
#include "bsm/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace bsm {

std::string to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::luma: return "luma";
    case ScorerKind::histogram: return "histogram";
    case ScorerKind::external: return "external";
  }
  return "?";
}

ScorerKind parse_scorer(const std::string& name) {
  if (name == "luma") return ScorerKind::luma;
  if (name == "histogram") return ScorerKind::histogram;
  if (name == "external") return ScorerKind::external;
  throw ConfigError("unknown scorer '" + name + "' (expected luma|histogram|external)");
}

template <typename Scalar>
Plane<Scalar> InstanceMaskSet<Scalar>::background() const {
  Plane<Scalar> top = Plane<Scalar>::Zero(height, width);
  for (const auto& m : instance_maps) top = top.max(m);
  return (Scalar(1) - top).max(Scalar(0)).min(Scalar(1));
}

template <typename Scalar>
void InstanceMaskSet<Scalar>::validate() const {
  if (instance_maps.size() != scores.size())
    throw InputError("instance mask set has " + std::to_string(instance_maps.size()) +
                     " masks but " + std::to_string(scores.size()) + " scores");
  for (std::size_t i = 0; i < instance_maps.size(); ++i) {
    const auto& m = instance_maps[i];
    if (m.rows() != height || m.cols() != width)
      throw InputError("instance mask " + std::to_string(i + 1) + " is " +
                       std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                       std::to_string(height) + "x" + std::to_string(width));
    if ((m < Scalar(0)).any() || (m > Scalar(1)).any() || !m.allFinite())
      throw InputError("instance mask " + std::to_string(i + 1) + " has values outside [0,1]");
    if (!(scores[i] >= Scalar(0) && scores[i] <= Scalar(1)))
      throw InputError("instance " + std::to_string(i + 1) + " confidence outside [0,1]");
  }
}

template <typename Scalar>
InstanceMaskSet<Scalar> InstanceMaskSet<Scalar>::empty(Index height, Index width) {
  InstanceMaskSet set;
  set.height = height;
  set.width = width;
  return set;
}

namespace {

template <typename Scalar>
Plane<Scalar> luma_plane(const Tensor<Scalar>& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw InputError("scorer expects an RGB image [3,H,W], got " + shape_string(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);
  const Scalar* v = image.values().data();
  Eigen::Map<const Plane<Scalar>> r(v, h, w), g(v + h * w, h, w), b(v + 2 * h * w, h, w);
  Plane<Scalar> y = Scalar(0.299) * r + Scalar(0.587) * g + Scalar(0.114) * b;
  return y.max(Scalar(0)).min(Scalar(1));
}

}  // namespace

template <typename Scalar>
HierarchyMap<Scalar> luma_score(const Tensor<Scalar>& image) {
  return {luma_plane(image), MapKind::brightness, "luma"};
}

template <typename Scalar>
HierarchyMap<Scalar> histogram_score(const Tensor<Scalar>& image, int bins) {
  if (bins < 2) throw ConfigError("histogram scorer needs at least 2 bins, got " + std::to_string(bins));
  const Plane<Scalar> y = luma_plane(image);
  const Index n = y.size();
  Eigen::Array<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> bin(y.rows(), y.cols());
  std::vector<Index> counts(bins, 0);
  for (Index i = 0; i < n; ++i) {
    const auto b = std::min<Index>(static_cast<Index>(std::floor(y(i) * bins)), bins - 1);
    bin(i) = b;
    ++counts[b];
  }
  std::vector<Scalar> cdf(bins);
  Index running = 0;
  for (int b = 0; b < bins; ++b) {
    running += counts[b];
    cdf[b] = static_cast<Scalar>(running) / static_cast<Scalar>(n);
  }
  Plane<Scalar> values(y.rows(), y.cols());
  for (Index i = 0; i < n; ++i) values(i) = cdf[bin(i)];
  return {std::move(values), MapKind::brightness, "histogram"};
}

std::vector<std::pair<double, double>> grading_ranges(Index instance_count) {
  if (instance_count < 0) throw InputError("negative instance count");
  const double parts = static_cast<double>(instance_count + 1);
  std::vector<std::pair<double, double>> ranges;
  for (Index i = 0; i <= instance_count; ++i)
    ranges.emplace_back(static_cast<double>(i) / parts, static_cast<double>(i + 1) / parts);
  return ranges;
}

template <typename Scalar>
HierarchyMap<Scalar> semantic_map(const InstanceMaskSet<Scalar>& masks) {
  masks.validate();
  const Index n = masks.count();
  const Scalar parts = static_cast<Scalar>(n + 1);

  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return masks.scores[a] < masks.scores[b]; });
  std::vector<Index> rank(n);
  for (Index r = 0; r < n; ++r) rank[order[r]] = r + 1;

  Plane<Scalar> values = Plane<Scalar>::Constant(masks.height, masks.width, Scalar(0.5) / parts);
  Eigen::Array<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> best =
      decltype(best)::Zero(masks.height, masks.width);
  for (Index k = 0; k < n; ++k) {
    const auto& m = masks.instance_maps[k];
    const Scalar score = masks.scores[k];
    for (Index i = 0; i < m.size(); ++i) {
      if (m(i) <= Scalar(0) || rank[k] <= best(i)) continue;
      best(i) = rank[k];
      const Scalar within = std::clamp(m(i) * score, Scalar(0), Scalar(1));
      values(i) = (static_cast<Scalar>(rank[k]) + within) / parts;
    }
  }
  return {std::move(values), MapKind::semantic, "instances:" + std::to_string(n)};
}

template <typename Scalar>
SortPlan build_sort_plan(const HierarchyMap<Scalar>& map) {
  if (!map.values.allFinite()) throw InputError("hierarchy map contains a non-finite score");
  const Index n = map.values.size();
  SortPlan plan;
  plan.key_snapshot.resize(n);
  for (Index i = 0; i < n; ++i) plan.key_snapshot[i] = static_cast<double>(map.values(i));
  plan.forward_index.resize(n);
  std::iota(plan.forward_index.begin(), plan.forward_index.end(), Index{0});
  const auto& keys = plan.key_snapshot;
  std::stable_sort(plan.forward_index.begin(), plan.forward_index.end(),
                   [&](Index a, Index b) { return keys[a] < keys[b]; });
  plan.inverse_index.resize(n);
  for (Index i = 0; i < n; ++i) plan.inverse_index[plan.forward_index[i]] = i;
  return plan;
}

template <typename Scalar>
HierarchyMap<Scalar> downsample_map(const HierarchyMap<Scalar>& map, Index target_height,
                                    Index target_width) {
  const Index h = map.height(), w = map.width();
  if (target_height < 1 || target_width < 1 || target_height > h || target_width > w ||
      h % target_height != 0 || w % target_width != 0)
    throw ConfigError("cannot area-downsample " + std::to_string(h) + "x" + std::to_string(w) +
                      " to " + std::to_string(target_height) + "x" + std::to_string(target_width) +
                      " (integer factors required)");
  const Index fy = h / target_height, fx = w / target_width;
  if (fy == 1 && fx == 1) return map;
  Plane<Scalar> out(target_height, target_width);
  const Scalar area = static_cast<Scalar>(fy * fx);
  for (Index y = 0; y < target_height; ++y)
    for (Index x = 0; x < target_width; ++x)
      out(y, x) = map.values.block(y * fy, x * fx, fy, fx).sum() / area;
  return {std::move(out), map.kind, map.source};
}

template <typename Scalar>
HierarchyMap<Scalar> brightness_map(const Tensor<Scalar>& image, ScorerKind scorer,
                                    const HierarchyMap<Scalar>* external_map) {
  switch (scorer) {
    case ScorerKind::luma: return luma_score(image);
    case ScorerKind::histogram: return histogram_score(image);
    case ScorerKind::external: {
      if (!external_map) throw ConfigError("external scorer selected but no score map supplied");
      if (image.ndim() != 3 || external_map->height() != image.dim(1) ||
          external_map->width() != image.dim(2))
        throw InputError("external score map does not match image " + shape_string(image.shape()));
      HierarchyMap<Scalar> m = *external_map;
      m.kind = MapKind::brightness;
      return m;
    }
  }
  throw ConfigError("unknown scorer");
}

MaskSidecarPaths sidecar_paths(const std::filesystem::path& image_path) {
  const auto stem = image_path.stem().string();
  const auto dir = image_path.parent_path();
  return {dir / (stem + ".inst.pgm"), dir / (stem + ".inst.txt")};
}

bool has_mask_sidecar(const std::filesystem::path& image_path) {
  return std::filesystem::exists(sidecar_paths(image_path).labels);
}

InstanceMaskSet<double> load_mask_sidecar(const std::filesystem::path& image_path,
                                          std::optional<std::pair<Index, Index>> expected_size) {
  const MaskSidecarPaths paths = sidecar_paths(image_path);
  const std::string name = image_path.filename().string();
  if (!std::filesystem::exists(paths.labels))
    throw DatasetError("mask sidecar " + paths.labels.string() + " not found");
  if (!std::filesystem::exists(paths.scores))
    throw DatasetError("mask-consistency error for " + name + ": " + paths.scores.string() +
                       " missing");
  GrayImage labels = read_pgm(paths.labels);
  if (expected_size && (labels.height != expected_size->first || labels.width != expected_size->second))
    throw DatasetError("mask-consistency error for " + name + ": label map is " +
                       std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                       ", image is " + std::to_string(expected_size->first) + "x" +
                       std::to_string(expected_size->second));

  std::ifstream in(paths.scores);
  std::vector<std::pair<Index, double>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Index id = 0;
    double conf = 0;
    std::string extra;
    if (!(ls >> id >> conf) || (ls >> extra))
      throw DatasetError("mask-consistency error for " + name + ": malformed line " +
                         std::to_string(line_no) + " in " + paths.scores.string());
    if (!(conf >= 0.0 && conf <= 1.0))
      throw DatasetError("mask-consistency error for " + name + ": confidence " +
                         std::to_string(conf) + " of instance " + std::to_string(id) +
                         " outside [0,1]");
    entries.emplace_back(id, conf);
  }
  const Index n = static_cast<Index>(entries.size());
  std::vector<double> scores(n, -1.0);
  for (const auto& [id, conf] : entries) {
    if (id < 1 || id > n || scores[id - 1] >= 0.0)
      throw DatasetError("mask-consistency error for " + name +
                         ": instance ids must be contiguous from 1 without repeats (saw " +
                         std::to_string(id) + " among " + std::to_string(n) + " lines)");
    scores[id - 1] = conf;
  }
  std::set<Index> label_ids;
  for (auto p : labels.pixels)
    if (p != 0) label_ids.insert(p);
  if (!label_ids.empty() && *label_ids.rbegin() > n)
    throw DatasetError("mask-consistency error for " + name + ": label map has " +
                       std::to_string(label_ids.size()) + " instance ids (max " +
                       std::to_string(*label_ids.rbegin()) + ") but " + std::to_string(n) +
                       " score lines");

  InstanceMaskSet<double> set = InstanceMaskSet<double>::empty(labels.height, labels.width);
  const auto dir = image_path.parent_path();
  const auto stem = image_path.stem().string();
  for (Index id = 1; id <= n; ++id) {
    const auto soft_path = dir / (stem + ".inst." + std::to_string(id) + ".pgm");
    Plane<double> mask(labels.height, labels.width);
    if (std::filesystem::exists(soft_path)) {
      GrayImage soft = read_pgm(soft_path);
      if (soft.height != labels.height || soft.width != labels.width)
        throw DatasetError("mask-consistency error for " + name + ": soft mask " +
                           soft_path.filename().string() + " size differs from label map");
      for (Index i = 0; i < mask.size(); ++i)
        mask(i) = static_cast<double>(soft.pixels[i]) / soft.maxval;
    } else {
      for (Index i = 0; i < mask.size(); ++i) mask(i) = labels.pixels[i] == id ? 1.0 : 0.0;
    }
    set.instance_maps.push_back(std::move(mask));
    set.scores.push_back(scores[id - 1]);
  }
  set.validate();
  return set;
}

void write_mask_sidecar(const std::filesystem::path& image_path, const Plane<int>& labels,
                        const std::vector<double>& confidences) {
  const MaskSidecarPaths paths = sidecar_paths(image_path);
  GrayImage img;
  img.height = labels.rows();
  img.width = labels.cols();
  img.maxval = 65535;
  img.pixels.resize(labels.size());
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels(i) < 0 || labels(i) > 65535) throw InputError("label id out of 16-bit range");
    img.pixels[i] = static_cast<std::uint16_t>(labels(i));
  }
  write_pgm(paths.labels, img);
  std::ofstream out(paths.scores);
  out.precision(17);
  for (std::size_t i = 0; i < confidences.size(); ++i) out << (i + 1) << ' ' << confidences[i] << '\n';
  if (!out) throw FormatError("failed writing " + paths.scores.string());
}

HierarchyMap<double> load_score_map(const std::filesystem::path& path) {
  GrayImage img = read_pgm(path);
  Plane<double> values(img.height, img.width);
  for (Index i = 0; i < values.size(); ++i)
    values(i) = static_cast<double>(img.pixels[i]) / img.maxval;
  return {std::move(values), MapKind::brightness, "external:" + path.filename().string()};
}

void save_score_map(const HierarchyMap<double>& map, const std::filesystem::path& path) {
  GrayImage img;
  img.height = map.height();
  img.width = map.width();
  img.maxval = 65535;
  img.pixels.resize(map.values.size());
  for (Index i = 0; i < map.values.size(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(map.values(i), 0.0, 1.0) * 65535.0));
  write_pgm(path, img);
}

#define BSM_INSTANTIATE_HIERARCHY(S)                                                          \
  template struct InstanceMaskSet<S>;                                                         \
  template HierarchyMap<S> luma_score(const Tensor<S>&);                                      \
  template HierarchyMap<S> histogram_score(const Tensor<S>&, int);                            \
  template HierarchyMap<S> semantic_map(const InstanceMaskSet<S>&);                           \
  template SortPlan build_sort_plan(const HierarchyMap<S>&);                                  \
  template HierarchyMap<S> downsample_map(const HierarchyMap<S>&, Index, Index);              \
  template HierarchyMap<S> brightness_map(const Tensor<S>&, ScorerKind, const HierarchyMap<S>*);

BSM_INSTANTIATE_HIERARCHY(float)
BSM_INSTANTIATE_HIERARCHY(double)

}  // namespace bsm
