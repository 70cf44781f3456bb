#include "bsm/losses.hpp"

#include "bsm/errors.hpp"
#include "bsm/ops.hpp"
#include "record.hpp"

#include <cmath>
#include <deque>
#include <numbers>

namespace bsm {

void LossWeights::validate() const {
  for (double w : {l1, ssim, edge})
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and non-negative");
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const double centre = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    g[i] = std::exp(-(i - centre) * (i - centre) / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  std::vector<double> w(size * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) w[y * size + x] = g[y] * g[x];
  return w;
}

namespace {

void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
}

template <typename Scalar>
Tensor<Scalar> as_batch(const Tensor<Scalar>& x, const char* op) {
  if (x.ndim() == 4) return x;
  if (x.ndim() == 3) return reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  throw DimensionError(std::string(op) + " expects [C,H,W] or [B,C,H,W], got " + shape_string(x.shape()));
}

template <typename Scalar>
Tensor<Scalar> window_tensor(int size, double sigma) {
  const auto w = gaussian_window(size, sigma);
  std::vector<Scalar> v(w.begin(), w.end());
  return Tensor<Scalar>::from_values({1, 1, size, size}, v);
}

template <typename Scalar>
Tensor<Scalar> luma_channel(const Tensor<Scalar>& images) {
  if (images.dim(1) == 1) return images;
  if (images.dim(1) != 3) throw InputError("edge maps need 1 or 3 channels, got " + shape_string(images.shape()));
  const Tensor<Scalar> weights = Tensor<Scalar>::from_values(
      {1, 3, 1, 1}, {Scalar(0.299), Scalar(0.587), Scalar(0.114)});
  return conv2d(images, weights);
}

// Cross-correlation of a plane with reflect padding, output the same size.
Plane<double> filter_reflect(const Plane<double>& in, const std::vector<double>& kernel, int size) {
  const Index h = in.rows(), w = in.cols();
  const int r = size / 2;
  auto fold = [](Index i, Index n) {
    if (n == 1) return Index{0};
    const Index period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  Plane<double> out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int ky = 0; ky < size; ++ky)
        for (int kx = 0; kx < size; ++kx)
          acc += kernel[ky * size + kx] * in(fold(y + ky - r, h), fold(x + kx - r, w));
      out(y, x) = acc;
    }
  return out;
}

const std::vector<double> kSobelX = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
const std::vector<double> kSobelY = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

}  // namespace

template <typename Scalar>
Tensor<Scalar> l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  check_same_shape("l1_loss", pred.shape(), gt.shape());
  return mean(abs(sub(pred, gt)));
}

template <typename Scalar>
Tensor<Scalar> ssim(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  check_same_shape("ssim", pred.shape(), gt.shape());
  const Tensor<Scalar> p4 = as_batch(pred, "ssim");
  const Tensor<Scalar> g4 = as_batch(gt, "ssim");
  const Index b = p4.dim(0), c = p4.dim(1), h = p4.dim(2), w = p4.dim(3);
  if (h < kSsimWindow || w < kSsimWindow)
    throw InputError("ssim needs images of at least 11x11, got " + shape_string(pred.shape()));
  const Shape planes{b * c, 1, h, w};
  const Tensor<Scalar> x = reshape(p4, planes);
  const Tensor<Scalar> y = reshape(g4, planes);
  const Tensor<Scalar> window = window_tensor<Scalar>(kSsimWindow, kSsimSigma);
  auto filt = [&](const Tensor<Scalar>& t) { return conv2d(t, window); };
  const Tensor<Scalar> mu_x = filt(x), mu_y = filt(y);
  const Tensor<Scalar> mu_xx = mul(mu_x, mu_x), mu_yy = mul(mu_y, mu_y), mu_xy = mul(mu_x, mu_y);
  const Tensor<Scalar> var_x = sub(filt(mul(x, x)), mu_xx);
  const Tensor<Scalar> var_y = sub(filt(mul(y, y)), mu_yy);
  const Tensor<Scalar> cov = sub(filt(mul(x, y)), mu_xy);
  const Scalar c1 = static_cast<Scalar>(kSsimC1), c2 = static_cast<Scalar>(kSsimC2);
  const Tensor<Scalar> num = mul(add_scalar(scale(mu_xy, Scalar(2)), c1), add_scalar(scale(cov, Scalar(2)), c2));
  const Tensor<Scalar> den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
  return mean(div(num, den));
}

template <typename Scalar>
Tensor<Scalar> ssim_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  return add_scalar(neg(ssim(pred, gt)), Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> soft_edge(const Tensor<Scalar>& image) {
  const Tensor<Scalar> x = as_batch(image, "soft_edge");
  const Index b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Tensor<Scalar> gray = luma_channel(x);
  const Tensor<Scalar> blurred =
      conv2d(pad_reflect(gray, kEdgeBlurSize / 2), window_tensor<Scalar>(kEdgeBlurSize, kEdgeBlurSigma));
  std::vector<Scalar> sobel(kSobelX.begin(), kSobelX.end());
  sobel.insert(sobel.end(), kSobelY.begin(), kSobelY.end());
  const Tensor<Scalar> grads = conv2d(pad_reflect(blurred, 1), Tensor<Scalar>::from_values({2, 1, 3, 3}, sobel));
  // sqrt(|g|^2 + eps^2) - eps is exactly 0 where the gradient vanishes.
  const Scalar eps = Scalar(1e-6);
  const Tensor<Scalar> magnitude =
      add_scalar(sqrt(add_scalar(sum(square(grads), 1, true), eps * eps)), -eps);
  const Tensor<Scalar> peak = add_scalar(max(reshape(magnitude, {b, h * w}), 1, true), Scalar(1e-6));
  return div(magnitude, reshape(peak, {b, 1, 1, 1}));
}

CannyStages canny_stages(const Plane<double>& gray, double low, double high) {
  const Index h = gray.rows(), w = gray.cols();
  CannyStages s;
  const Plane<double> blurred =
      filter_reflect(gray, gaussian_window(kEdgeBlurSize, kEdgeBlurSigma), kEdgeBlurSize);
  const Plane<double> gx = filter_reflect(blurred, kSobelX, 3);
  const Plane<double> gy = filter_reflect(blurred, kSobelY, 3);
  s.magnitude = (gx.square() + gy.square()).sqrt();

  // Non-maximum suppression along the quantized gradient direction. A pixel
  // survives when strictly above its predecessor and not below its successor,
  // so a plateau two pixels wide keeps exactly one.
  const double tan22 = std::tan(std::numbers::pi / 8.0), tan67 = std::tan(3.0 * std::numbers::pi / 8.0);
  auto mag = [&](Index y, Index x) { return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : s.magnitude(y, x); };
  s.suppressed = Plane<double>::Zero(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double m = s.magnitude(y, x);
      if (m <= 0.0) continue;
      const double ax = std::abs(gx(y, x)), ay = std::abs(gy(y, x));
      Index dy = 0, dx = 0;
      if (ay <= tan22 * ax) {
        dx = 1;
      } else if (ay > tan67 * ax) {
        dy = 1;
      } else {
        dy = 1;
        dx = (gx(y, x) * gy(y, x) > 0) ? 1 : -1;
      }
      if (m > mag(y - dy, x - dx) && m >= mag(y + dy, x + dx)) s.suppressed(y, x) = m;
    }

  const double peak = s.magnitude.maxCoeff();
  s.weak = Plane<double>::Zero(h, w);
  s.edges = Plane<double>::Zero(h, w);
  // Rounding noise of the blur on flat images is not an edge.
  if (!(peak > 1e-8)) return s;
  const double lo = low * peak, hi = high * peak;
  std::deque<std::pair<Index, Index>> queue;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double m = s.suppressed(y, x);
      if (m > 0.0 && m >= lo) s.weak(y, x) = 1.0;
      if (m > 0.0 && m >= hi) {
        s.edges(y, x) = 1.0;
        queue.emplace_back(y, x);
      }
    }
  while (!queue.empty()) {
    const auto [y, x] = queue.front();
    queue.pop_front();
    for (Index ny = y - 1; ny <= y + 1; ++ny)
      for (Index nx = x - 1; nx <= x + 1; ++nx) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        if (s.weak(ny, nx) > 0.0 && s.edges(ny, nx) == 0.0) {
          s.edges(ny, nx) = 1.0;
          queue.emplace_back(ny, nx);
        }
      }
  }
  return s;
}

Plane<double> canny_reference(const Plane<double>& gray) { return canny_stages(gray).edges; }

template <typename Scalar>
Tensor<Scalar> canny_reference(const Tensor<Scalar>& images) {
  const Tensor<Scalar> x = as_batch(images, "canny_reference");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c != 1 && c != 3) throw InputError("edge maps need 1 or 3 channels, got " + shape_string(x.shape()));
  Vector<Scalar> out(b * h * w);
  const auto& v = x.values();
  for (Index i = 0; i < b; ++i) {
    Plane<double> gray(h, w);
    for (Index p = 0; p < h * w; ++p) {
      const Index base = i * c * h * w + p;
      gray(p) = c == 1 ? static_cast<double>(v[base])
                       : 0.299 * v[base] + 0.587 * v[base + h * w] + 0.114 * v[base + 2 * h * w];
    }
    const Plane<double> edges = canny_reference(gray);
    for (Index p = 0; p < h * w; ++p) out[i * h * w + p] = static_cast<Scalar>(edges(p));
  }
  return Tensor<Scalar>(Shape{b, 1, h, w}, std::move(out));
}

template <typename Scalar>
Tensor<Scalar> binary_cross_entropy(const Tensor<Scalar>& prob, const Tensor<Scalar>& target) {
  check_same_shape("binary_cross_entropy", prob.shape(), target.shape());
  const Scalar floor = static_cast<Scalar>(kBceFloor);
  const Tensor<Scalar> log_p = log(clamp(prob, floor, Scalar(1)));
  const Tensor<Scalar> log_q = log(clamp(add_scalar(neg(prob), Scalar(1)), floor, Scalar(1)));
  const Tensor<Scalar> t = target.detach();
  const Tensor<Scalar> not_t = add_scalar(neg(t), Scalar(1));
  return neg(mean(add(mul(t, log_p), mul(not_t, log_q))));
}

template <typename Scalar>
Tensor<Scalar> edge_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt) {
  check_same_shape("edge_loss", pred.shape(), gt.shape());
  return binary_cross_entropy(soft_edge(pred), canny_reference(gt.detach()));
}

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt,
                                 const LossWeights& weights) {
  weights.validate();
  LossBreakdown<Scalar> r;
  r.l1 = l1_loss(pred, gt);
  r.ssim = ssim_loss(pred, gt);
  r.edge = edge_loss(pred, gt);
  r.total = add(add(scale(r.l1, static_cast<Scalar>(weights.l1)), scale(r.ssim, static_cast<Scalar>(weights.ssim))),
                scale(r.edge, static_cast<Scalar>(weights.edge)));
  return r;
}

template <typename Scalar>
double psnr(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double peak) {
  check_same_shape("psnr", pred.shape(), gt.shape());
  const double mse =
      (pred.values().template cast<double>() - gt.values().template cast<double>()).squaredNorm() /
      static_cast<double>(pred.numel());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double edge_f1(const Plane<double>& predicted, const Plane<double>& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
    throw DimensionError("edge_f1: edge maps of different sizes");
  const double tp = ((predicted > 0.5) && (truth > 0.5)).cast<double>().sum();
  const double np = (predicted > 0.5).cast<double>().sum();
  const double nt = (truth > 0.5).cast<double>().sum();
  if (np == 0.0 && nt == 0.0) return 1.0;
  if (tp == 0.0) return 0.0;
  const double precision = tp / np, recall = tp / nt;
  return 2.0 * precision * recall / (precision + recall);
}

#define BSM_INSTANTIATE_LOSSES(S)                                                           \
  template Tensor<S> l1_loss(const Tensor<S>&, const Tensor<S>&);                           \
  template Tensor<S> ssim(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> ssim_loss(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> soft_edge(const Tensor<S>&);                                           \
  template Tensor<S> canny_reference(const Tensor<S>&);                                     \
  template Tensor<S> binary_cross_entropy(const Tensor<S>&, const Tensor<S>&);              \
  template Tensor<S> edge_loss(const Tensor<S>&, const Tensor<S>&);                         \
  template LossBreakdown<S> total_loss(const Tensor<S>&, const Tensor<S>&, const LossWeights&); \
  template double psnr(const Tensor<S>&, const Tensor<S>&, double);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_LOSSES)

}  // namespace bsm
