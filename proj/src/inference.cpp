#include "bsm/inference.hpp"

#include "bsm/errors.hpp"
#include "bsm/image_io.hpp"
#include "bsm/losses.hpp"
#include "allocator.hpp"

#include <algorithm>
#include <cstdio>

namespace bsm {

Index padded_extent(Index n) {
  Index p = 16;
  while (p < n) p *= 2;
  return p;
}

namespace {

Index fold(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> pad_image(const Tensor<Scalar>& image, Index height, Index width) {
  if (image.ndim() != 3) throw DimensionError("pad_image expects [C,H,W], got " + shape_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (height < h || width < w) throw InputError("pad_image cannot shrink an image");
  Vector<Scalar> out(c * height * width);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x)
        out[(ch * height + y) * width + x] = image.values()[(ch * h + fold(y, h)) * w + fold(x, w)];
  return Tensor<Scalar>(Shape{c, height, width}, std::move(out));
}

template <typename Scalar>
Plane<Scalar> pad_plane(const Plane<Scalar>& plane, Index height, Index width) {
  const Index h = plane.rows(), w = plane.cols();
  if (height < h || width < w) throw InputError("pad_plane cannot shrink a plane");
  Plane<Scalar> out(height, width);
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) out(y, x) = plane(fold(y, h), fold(x, w));
  return out;
}

namespace {

template <typename Scalar>
HierarchyMap<double> to_double(const HierarchyMap<Scalar>& m) {
  HierarchyMap<double> out;
  out.values = m.values.template cast<double>();
  out.kind = m.kind;
  out.source = m.source;
  return out;
}

Plane<double> order_plane(const Permutation& inverse, Index padded_width, Index height, Index width) {
  const double last = std::max<double>(1.0, static_cast<double>(inverse.size()) - 1.0);
  Plane<double> out(height, width);
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) out(y, x) = static_cast<double>(inverse[y * padded_width + x]) / last;
  return out;
}

}  // namespace

template <typename Scalar>
Enhancement enhance_sample(const BsmambaModel<Scalar>& model, const PairedSample& sample) {
  detail::tune_allocator();
  const Index h = sample.low.dim(1), w = sample.low.dim(2);
  const Index ph = padded_extent(h), pw = padded_extent(w);
  const Tensor<Scalar> low = tensor_cast<Scalar>(sample.low);
  auto [bright, sem] = sample_maps<Scalar>(low, sample, model.config().block.scorer);
  HierarchyMap<Scalar> pb = bright, ps = sem;
  pb.values = pad_plane(bright.values, ph, pw);
  ps.values = pad_plane(sem.values, ph, pw);
  ForwardContext ctx = make_context<Scalar>({pb}, {ps}, ph, pw);
  const Tensor<Scalar> input = reshape(pad_image(low, ph, pw), {1, 3, ph, pw});
  const ModelOutput<Scalar> out = model.forward(input, ctx);

  Enhancement e;
  Vector<double> pixels(3 * h * w);
  const auto& v = out.output.values();
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) pixels[(c * h + y) * w + x] = static_cast<double>(v[(c * ph + y) * pw + x]);
  e.output = Tensor<double>(Shape{3, h, w}, std::move(pixels));
  e.brightness = to_double(bright);
  e.semantic = to_double(sem);
  e.brightness_order = order_plane(ctx.brightness.inverse.front(), pw, h, w);
  e.semantic_order = order_plane(ctx.semantic.inverse.front(), pw, h, w);
  e.scans = ctx.counter.scans;
  return e;
}

namespace {

std::vector<std::filesystem::path> input_images(const std::filesystem::path& input) {
  if (!std::filesystem::exists(input)) throw DatasetError("no such input " + input.string());
  if (!std::filesystem::is_directory(input)) return {input};
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(input)) {
    const auto& p = entry.path();
    const std::string name = p.filename().string();
    if (entry.is_regular_file() && p.extension() == ".png" && !name.ends_with(".enhanced.png")) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DatasetError("no PNG images in " + input.string());
  return out;
}

Tensor<double> plane_image(const Plane<double>& plane) {
  Vector<double> v(plane.size());
  for (Index i = 0; i < plane.size(); ++i) v[i] = plane(i);
  return Tensor<double>(Shape{1, plane.rows(), plane.cols()}, std::move(v));
}

}  // namespace

std::vector<std::filesystem::path> enhance_files(const BsmambaModel<double>& model, const std::filesystem::path& input,
                                                 const std::filesystem::path& out_dir, const EnhanceOptions& options,
                                                 const std::function<void(const std::string&)>& warn) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& path : input_images(input)) {
    PairedSample s;
    s.name = path.filename().string();
    s.low_path = path;
    s.low = read_png(path);
    const Index h = s.low.dim(1), w = s.low.dim(2);
    if (has_mask_sidecar(path)) {
      s.masks = load_mask_sidecar(path, std::make_pair(h, w));
    } else if (warn) {
      warn("warning: no mask sidecar for " + s.name + "; semantic map uses the background only (n = 0)");
    }
    const auto score = score_sidecar_path(path);
    if (std::filesystem::exists(score)) s.external_score = load_score_map(score);
    const Enhancement e = enhance_sample(model, s);
    const std::string stem = path.stem().string();
    auto emit = [&](const std::string& suffix, const Tensor<double>& image) {
      const auto target = out_dir / (stem + suffix);
      write_png(target, image);
      written.push_back(target);
    };
    emit(".enhanced.png", e.output);
    if (options.dump_maps) {
      emit(".brightness.png", plane_image(e.brightness.values));
      emit(".semantic.png", plane_image(e.semantic.values));
      emit(".brightness_order.png", plane_image(e.brightness_order));
      emit(".semantic_order.png", plane_image(e.semantic_order));
    }
  }
  return written;
}

std::string EvalReport::table() const {
  std::string s = format("%-32s %12s %10s\n", "image", "psnr", "ssim");
  for (const auto& r : rows) s += format("%-32s %12.4f %10.6f\n", r.name.c_str(), r.psnr, r.ssim);
  s += format("mean_psnr=%.17g\nmean_ssim=%.17g\nscans_per_forward=%lld\n", mean_psnr, mean_ssim,
              static_cast<long long>(scans_per_forward));
  return s;
}

std::string EvalReport::csv() const {
  std::string s = "image,psnr,ssim\n";
  for (const auto& r : rows) s += format("%s,%.17g,%.17g\n", r.name.c_str(), r.psnr, r.ssim);
  s += format("mean,%.17g,%.17g\n", mean_psnr, mean_ssim);
  return s;
}

namespace {

void finish(EvalReport& report) {
  for (const auto& r : report.rows) {
    report.mean_psnr += r.psnr;
    report.mean_ssim += r.ssim;
  }
  const double n = static_cast<double>(report.rows.size());
  report.mean_psnr /= n;
  report.mean_ssim /= n;
}

}  // namespace

template <typename Scalar>
EvalReport evaluate(const BsmambaModel<Scalar>& model, const PairedDataset& dataset) {
  if (dataset.samples.empty()) throw DatasetError("empty dataset");
  EvalReport report;
  for (const auto& s : dataset.samples) {
    const Enhancement e = enhance_sample(model, s);
    report.rows.push_back({s.name, psnr(e.output, s.gt), ssim(e.output, s.gt).item()});
    report.scans_per_forward = e.scans;
  }
  finish(report);
  return report;
}

EvalReport evaluate_identity(const PairedDataset& dataset) {
  if (dataset.samples.empty()) throw DatasetError("empty dataset");
  EvalReport report;
  for (const auto& s : dataset.samples) report.rows.push_back({s.name, psnr(s.low, s.gt), ssim(s.low, s.gt).item()});
  finish(report);
  return report;
}

#define BSM_INSTANTIATE_INFERENCE(S)                                              \
  template Tensor<S> pad_image(const Tensor<S>&, Index, Index);                  \
  template Plane<S> pad_plane(const Plane<S>&, Index, Index);                    \
  template Enhancement enhance_sample(const BsmambaModel<S>&, const PairedSample&); \
  template EvalReport evaluate(const BsmambaModel<S>&, const PairedDataset&);

BSM_INSTANTIATE_INFERENCE(float)
BSM_INSTANTIATE_INFERENCE(double)

}  // namespace bsm
