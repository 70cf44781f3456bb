#include "bsm/train.hpp"

#include "bsm/checkpoint.hpp"
#include "bsm/errors.hpp"
#include "bsm/image_io.hpp"
#include "bsm/inference.hpp"
#include "allocator.hpp"
#include "parse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace bsm {

namespace {

bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

std::string format(const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string join(const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) s += (i ? ", " : "") + format("%.17g", values[i]);
  return s;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (!(std::isfinite(learning_rate) && learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (crop_size < 16 || !is_power_of_two(crop_size))
    throw ConfigError("crop_size must be a power of two >= 16, got " + std::to_string(crop_size));
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (!(milestones[i] > 0.0 && milestones[i] < 1.0)) throw ConfigError("milestones must lie in (0, 1)");
    if (i > 0 && !(milestones[i] > milestones[i - 1])) throw ConfigError("milestones must be strictly increasing");
  }
  if (!(std::isfinite(decay) && decay > 0)) throw ConfigError("decay must be positive");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << format("learning_rate = %.17g\n", learning_rate) << "batch_size = " << batch_size << '\n'
      << "crop_size = " << crop_size << '\n'
      << "iterations = " << iterations << '\n'
      << "milestones = " << join(milestones) << '\n'
      << format("decay = %.17g\n", decay) << "loss_weights = " << join({loss.l1, loss.ssim, loss.edge}) << '\n'
      << "seed = " << seed << '\n'
      << "precision = " << precision << '\n'
      << "log_every = " << log_every << '\n'
      << "checkpoint_at_milestones = " << (checkpoint_at_milestones ? "true" : "false") << '\n'
      << model.to_text();
  return out.str();
}

TrainConfig TrainConfig::from_entries(const std::map<std::string, std::string>& entries) {
  using namespace detail;
  TrainConfig c;
  std::map<std::string, std::string> arch;
  for (const auto& [key, value] : entries) {
    if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "batch_size") c.batch_size = parse_index(key, value);
    else if (key == "crop_size") c.crop_size = parse_index(key, value);
    else if (key == "iterations") c.iterations = parse_index(key, value);
    else if (key == "milestones") c.milestones = value.empty() ? std::vector<double>{} : parse_doubles(key, value);
    else if (key == "decay") c.decay = parse_double(key, value);
    else if (key == "loss_weights") {
      const auto w = parse_doubles(key, value);
      if (w.size() != 3) throw ConfigError("loss_weights expects three values (l1, ssim, edge)");
      c.loss = {w[0], w[1], w[2]};
    } else if (key == "seed") {
      const Index s = parse_index(key, value);
      if (s < 0) throw ConfigError("seed must be non-negative");
      c.seed = static_cast<std::uint64_t>(s);
    } else if (key == "precision") c.precision = static_cast<int>(parse_index(key, value));
    else if (key == "log_every") c.log_every = parse_index(key, value);
    else if (key == "checkpoint_at_milestones") c.checkpoint_at_milestones = parse_bool(key, value);
    else arch[key] = value;
  }
  c.model = ModelConfig::from_entries(arch);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return from_entries(detail::parse_entries(text.str(), path.string()));
}

TrainConfig TrainConfig::with_overrides(const std::vector<std::string>& assignments) const {
  auto entries = detail::parse_entries(to_text(), "config");
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
    const std::string key = detail::trim(a.substr(0, eq));
    if (!entries.count(key)) throw ConfigError("unknown config key '" + key + "'");
    entries[key] = detail::trim(a.substr(eq + 1));
  }
  return from_entries(entries);
}

std::filesystem::path score_sidecar_path(const std::filesystem::path& image_path) {
  return image_path.parent_path() / (image_path.stem().string() + ".score.pgm");
}

namespace {

std::set<std::string> png_names(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DatasetError("missing directory " + dir.string());
  std::set<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") names.insert(entry.path().filename().string());
  return names;
}

}  // namespace

PairedDataset load_dataset(const std::filesystem::path& root) {
  const auto low = png_names(root / "low");
  const auto high = png_names(root / "high");
  std::vector<std::string> orphans;
  for (const auto& n : low)
    if (!high.count(n)) orphans.push_back("low/" + n);
  for (const auto& n : high)
    if (!low.count(n)) orphans.push_back("high/" + n);
  if (!orphans.empty()) {
    std::string list;
    for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
    throw DatasetError("unpaired image(s) in " + root.string() + ": " + list);
  }
  if (low.empty()) throw DatasetError("no PNG pairs under " + root.string());
  PairedDataset d;
  d.root = root;
  for (const auto& name : low) {
    PairedSample s;
    s.name = name;
    s.low_path = root / "low" / name;
    s.gt_path = root / "high" / name;
    s.low = read_png(s.low_path);
    s.gt = read_png(s.gt_path);
    if (s.low.shape() != s.gt.shape())
      throw DatasetError(name + ": low " + shape_string(s.low.shape()) + " vs high " + shape_string(s.gt.shape()));
    const Index h = s.low.dim(1), w = s.low.dim(2);
    if (has_mask_sidecar(s.low_path)) s.masks = load_mask_sidecar(s.low_path, std::make_pair(h, w));
    const auto score = score_sidecar_path(s.low_path);
    if (std::filesystem::exists(score)) {
      s.external_score = load_score_map(score);
      if (s.external_score->height() != h || s.external_score->width() != w)
        throw DatasetError(score.string() + " does not match the size of " + name);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

CropWindow draw_crop(Index height, Index width, Index crop, Rng& rng) {
  if (height < crop || width < crop)
    throw InputError("image " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the " +
                     std::to_string(crop) + " crop");
  CropWindow w;
  w.size = crop;
  w.top = std::uniform_int_distribution<Index>(0, height - crop)(rng);
  w.left = std::uniform_int_distribution<Index>(0, width - crop)(rng);
  std::uniform_int_distribution<int> coin(0, 1);
  w.flip_horizontal = coin(rng) == 1;
  w.flip_vertical = coin(rng) == 1;
  return w;
}

namespace {

// Source pixel of output (y, x) under the window.
std::pair<Index, Index> source_of(const CropWindow& w, Index y, Index x) {
  const Index sy = w.flip_vertical ? w.size - 1 - y : y;
  const Index sx = w.flip_horizontal ? w.size - 1 - x : x;
  return {w.top + sy, w.left + sx};
}

Tensor<double> crop_image(const Tensor<double>& image, const CropWindow& w) {
  const Index c = image.dim(0), h = image.dim(1), wd = image.dim(2);
  Vector<double> out(c * w.size * w.size);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < w.size; ++y)
      for (Index x = 0; x < w.size; ++x) {
        const auto [sy, sx] = source_of(w, y, x);
        out[(ch * w.size + y) * w.size + x] = image.values()[(ch * h + sy) * wd + sx];
      }
  return Tensor<double>(Shape{c, w.size, w.size}, std::move(out));
}

template <typename T>
Plane<T> crop_plane(const Plane<T>& plane, const CropWindow& w) {
  Plane<T> out(w.size, w.size);
  for (Index y = 0; y < w.size; ++y)
    for (Index x = 0; x < w.size; ++x) {
      const auto [sy, sx] = source_of(w, y, x);
      out(y, x) = plane(sy, sx);
    }
  return out;
}

}  // namespace

PairedSample apply_crop(const PairedSample& sample, const CropWindow& window) {
  const Index h = sample.low.dim(1), w = sample.low.dim(2);
  if (window.top < 0 || window.left < 0 || window.top + window.size > h || window.left + window.size > w)
    throw InputError("crop window outside the image");
  PairedSample out;
  out.name = sample.name;
  out.low_path = sample.low_path;
  out.gt_path = sample.gt_path;
  out.low = crop_image(sample.low, window);
  out.gt = crop_image(sample.gt, window);
  if (sample.masks) {
    InstanceMaskSet<double> m;
    m.height = m.width = window.size;
    m.scores = sample.masks->scores;
    for (const auto& plane : sample.masks->instance_maps) m.instance_maps.push_back(crop_plane(plane, window));
    out.masks = std::move(m);
  }
  if (sample.external_score) {
    HierarchyMap<double> s = *sample.external_score;
    s.values = crop_plane(s.values, window);
    out.external_score = std::move(s);
  }
  return out;
}

PairedSample augment(const PairedSample& sample, Rng& rng, Index crop) {
  return apply_crop(sample, draw_crop(sample.low.dim(1), sample.low.dim(2), crop, rng));
}

template <typename Scalar>
void adam_step(NamedParameters<Scalar>& parameters, AdamState<Scalar>& state, double lr,
               const AdamOptions& options) {
  if (state.m.empty()) {
    for (const auto& [name, t] : parameters) {
      state.m.push_back(Vector<Scalar>::Zero(t.numel()));
      state.v.push_back(Vector<Scalar>::Zero(t.numel()));
    }
  }
  if (state.m.size() != parameters.size()) throw ContractError("Adam state does not match the parameter list");
  for (const auto& [name, t] : parameters)
    if (t.has_grad() && !t.grad().allFinite())
      throw NumericError("non-finite gradient in '" + name + "'");
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(options.beta1), b2 = static_cast<Scalar>(options.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(options.beta1, static_cast<double>(state.step)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(options.beta2, static_cast<double>(state.step)));
  const Scalar eps = static_cast<Scalar>(options.epsilon), rate = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    Tensor<Scalar>& t = parameters[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (t.has_grad()) {
      m = b1 * m + (Scalar(1) - b1) * t.grad();
      v = b2 * v + (Scalar(1) - b2) * t.grad().cwiseProduct(t.grad());
    } else {
      m *= b1;
      v *= b2;
    }
    t.mutable_values().array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

std::vector<Index> milestone_iterations(const TrainConfig& config) {
  std::vector<Index> out;
  for (double m : config.milestones) out.push_back(static_cast<Index>(std::llround(m * static_cast<double>(config.iterations))));
  return out;
}

double scheduled_lr(const TrainConfig& config, Index iteration) {
  double lr = config.learning_rate;
  for (Index at : milestone_iterations(config))
    if (iteration >= at) lr *= config.decay;
  return lr;
}

template <typename Scalar>
std::pair<HierarchyMap<Scalar>, HierarchyMap<Scalar>> sample_maps(const Tensor<Scalar>& low,
                                                                  const PairedSample& sample,
                                                                  ScorerKind scorer) {
  std::optional<HierarchyMap<Scalar>> external;
  if (sample.external_score) {
    external.emplace();
    external->values = sample.external_score->values.template cast<Scalar>();
    external->source = sample.external_score->source;
  }
  if (scorer == ScorerKind::external && !external)
    throw DatasetError("external scorer needs " + score_sidecar_path(sample.low_path).filename().string());
  HierarchyMap<Scalar> bright = brightness_map(low, scorer, external ? &*external : nullptr);
  InstanceMaskSet<Scalar> masks = InstanceMaskSet<Scalar>::empty(low.dim(1), low.dim(2));
  if (sample.masks) {
    masks.instance_maps.clear();
    for (const auto& p : sample.masks->instance_maps) masks.instance_maps.push_back(p.template cast<Scalar>());
    for (double s : sample.masks->scores) masks.scores.push_back(static_cast<Scalar>(s));
  }
  return {std::move(bright), semantic_map(masks)};
}

template <typename Scalar>
TrainResult train_model(BsmambaModel<Scalar>& model, const TrainConfig& config, const PairedDataset& dataset,
                        const std::filesystem::path& checkpoint,
                        const std::function<void(const std::string&)>& on_log) {
  config.validate();
  if (dataset.samples.empty()) throw DatasetError("empty dataset");
  if (!(model.config() == config.model)) throw ConfigError("model architecture differs from the training config");
  detail::tune_allocator();

  // The data stream has its own generator so that weight initialisation and
  // sampling do not interleave.
  Rng rng(config.seed ^ 0x5bd1e995ULL);
  NamedParameters<Scalar> params = model.parameters();
  AdamState<Scalar> adam;
  const auto milestones = milestone_iterations(config);
  const Index crop = config.crop_size, batch = config.batch_size;

  std::vector<std::size_t> order(dataset.samples.size());
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult result;
  double window_loss = 0, window_psnr = 0;
  Index window = 0;
  auto emit = [&](const std::string& line) {
    result.log_text += line + "\n";
    if (on_log) on_log(line);
  };

  for (Index it = 0; it < config.iterations; ++it) {
    const double lr = scheduled_lr(config, it);
    Vector<Scalar> low_v(batch * 3 * crop * crop), gt_v(batch * 3 * crop * crop);
    std::vector<HierarchyMap<Scalar>> bright, sem;
    for (Index b = 0; b < batch; ++b) {
      const PairedSample s = augment(dataset.samples[next_index()], rng, crop);
      const Index n = 3 * crop * crop;
      low_v.segment(b * n, n) = s.low.values().template cast<Scalar>();
      gt_v.segment(b * n, n) = s.gt.values().template cast<Scalar>();
      auto maps = sample_maps<Scalar>(tensor_cast<Scalar>(s.low), s, config.model.block.scorer);
      bright.push_back(std::move(maps.first));
      sem.push_back(std::move(maps.second));
    }
    const Tensor<Scalar> low(Shape{batch, 3, crop, crop}, std::move(low_v));
    const Tensor<Scalar> gt(Shape{batch, 3, crop, crop}, std::move(gt_v));
    ForwardContext ctx = make_context(bright, sem, crop, crop);
    const ModelOutput<Scalar> out = model.forward(low, ctx);
    const LossBreakdown<Scalar> loss = total_loss(out.output, gt, config.loss);
    loss.total.backward();
    adam_step(params, adam, lr);
    for (auto& [name, t] : params) t.zero_grad();

    const double value = static_cast<double>(loss.total.item());
    result.losses.push_back(value);
    window_loss += value;
    window_psnr += psnr(out.output, gt);
    ++window;
    if ((it + 1) % config.log_every == 0 || it + 1 == config.iterations) {
      TrainLogEntry e{it + 1, lr, window_loss / static_cast<double>(window), window_psnr / static_cast<double>(window)};
      result.log.push_back(e);
      emit(format("iter=%lld lr=%.17g loss=%.17g psnr=%.17g", static_cast<long long>(e.iteration), e.lr, e.loss,
                  e.psnr));
      window_loss = window_psnr = 0;
      window = 0;
    }
    const bool at_milestone = std::find(milestones.begin(), milestones.end(), it + 1) != milestones.end();
    if (!checkpoint.empty() && config.checkpoint_at_milestones && at_milestone && it + 1 < config.iterations)
      save_checkpoint(checkpoint, config.model, params);
  }
  if (!checkpoint.empty()) save_checkpoint(checkpoint, config.model, params);

  double final_sum = 0, base_sum = 0;
  for (const auto& s : dataset.samples) {
    const Enhancement e = enhance_sample(model, s);
    final_sum += psnr(e.output, s.gt);
    base_sum += psnr(s.low, s.gt);
  }
  const double n = static_cast<double>(dataset.samples.size());
  result.final_psnr = final_sum / n;
  result.baseline_psnr = base_sum / n;
  emit(format("final_psnr=%.17g baseline_psnr=%.17g", result.final_psnr, result.baseline_psnr));
  return result;
}

TrainResult train(const TrainConfig& config, const PairedDataset& dataset, const std::filesystem::path& checkpoint,
                  const std::function<void(const std::string&)>& on_log) {
  config.validate();
  if (config.precision == 32) {
    BsmambaModel<float> model(config.model, config.seed);
    return train_model(model, config, dataset, checkpoint, on_log);
  }
  BsmambaModel<double> model(config.model, config.seed);
  return train_model(model, config, dataset, checkpoint, on_log);
}

#define BSM_INSTANTIATE_TRAIN(S)                                                                       \
  template void adam_step(NamedParameters<S>&, AdamState<S>&, double, const AdamOptions&);           \
  template std::pair<HierarchyMap<S>, HierarchyMap<S>> sample_maps(const Tensor<S>&, const PairedSample&, \
                                                                   ScorerKind);                       \
  template TrainResult train_model(BsmambaModel<S>&, const TrainConfig&, const PairedDataset&,         \
                                   const std::filesystem::path&, const std::function<void(const std::string&)>&);

BSM_INSTANTIATE_TRAIN(float)
BSM_INSTANTIATE_TRAIN(double)

}  // namespace bsm
