#include "bsm/denet.hpp"

#include "bsm/errors.hpp"
#include "bsm/fft.hpp"
#include "bsm/ops.hpp"
#include "record.hpp"

#include <cmath>

namespace bsm {

namespace {

template <typename Scalar>
Tensor<Scalar> conv_weight(Index out, Index in, Index k, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(in * k * k));
  return uniform<Scalar>({out, in, k, k}, -bound, bound, rng, true);
}

template <typename Scalar>
Tensor<Scalar> zeros_param(const Shape& shape) {
  return Tensor<Scalar>::zeros(shape, true);
}

}  // namespace

template <typename Scalar>
FfcBlockWeights<Scalar> FfcBlockWeights<Scalar>::init(Index channels, double alpha, Rng& rng) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("FFC split ratio must lie in (0,1)");
  FfcBlockWeights w;
  w.global_channels = static_cast<Index>(std::lround(alpha * static_cast<double>(channels)));
  w.local_channels = channels - w.global_channels;
  if (w.global_channels < 1 || w.local_channels < 1)
    throw ConfigError("FFC split of " + std::to_string(channels) + " channels leaves an empty branch");
  const Index cl = w.local_channels, cg = w.global_channels;
  w.l2l_w = conv_weight<Scalar>(cl, cl, 3, rng);
  w.l2l_b = zeros_param<Scalar>({cl});
  w.g2l_w = conv_weight<Scalar>(cl, cg, 1, rng);
  w.l2g_w = conv_weight<Scalar>(cg, cl, 1, rng);
  w.spec_w = conv_weight<Scalar>(2 * cg, 2 * cg, 1, rng);
  w.spec_b = zeros_param<Scalar>({2 * cg});
  return w;
}

template <typename Scalar>
void FfcBlockWeights<Scalar>::set_identity_spectral() {
  const Index n = 2 * global_channels;
  Vector<Scalar> eye = Vector<Scalar>::Zero(n * n);
  for (Index i = 0; i < n; ++i) eye[i * n + i] = Scalar(1);
  spec_w = Tensor<Scalar>(Shape{n, n, 1, 1}, std::move(eye), true);
  spec_b = zeros_param<Scalar>({n});
}

template <typename Scalar>
Tensor<Scalar> ffc_spectral_branch(const Tensor<Scalar>& x, const FfcBlockWeights<Scalar>& w) {
  if (x.ndim() != 4 || x.dim(1) != w.global_channels)
    throw DimensionError("spectral branch expects [B," + std::to_string(w.global_channels) +
                         ",H,W], got " + shape_string(x.shape()));
  const ComplexPair<Scalar> spectrum = fft2_real(x);
  const Tensor<Scalar> stacked = concat<Scalar>({spectrum.real, spectrum.imag}, 1);
  const Tensor<Scalar> mixed = conv2d(stacked, w.spec_w, w.spec_b);
  auto planes = split(mixed, {w.global_channels, w.global_channels}, 1);
  return ifft2_real(ComplexPair<Scalar>{planes[0], planes[1]});
}

template <typename Scalar>
Tensor<Scalar> ffc_block(const Tensor<Scalar>& x, const FfcBlockWeights<Scalar>& w) {
  if (x.ndim() != 4 || x.dim(1) != w.local_channels + w.global_channels)
    throw DimensionError("FFC block expects " + std::to_string(w.local_channels + w.global_channels) +
                         " channels, got " + shape_string(x.shape()));
  auto parts = split(x, {w.local_channels, w.global_channels}, 1);
  const Tensor<Scalar>& xl = parts[0];
  const Tensor<Scalar>& xg = parts[1];
  const Tensor<Scalar> out_l = add(conv2d(xl, w.l2l_w, w.l2l_b, 1, 1), conv2d(xg, w.g2l_w));
  const Tensor<Scalar> out_g = add(conv2d(xl, w.l2g_w), ffc_spectral_branch(xg, w));
  return add(x, gelu(concat<Scalar>({out_l, out_g}, 1)));
}

void DenetConfig::validate() const {
  if (width < 1 || ffc_blocks < 0) throw ConfigError("DE-Net width must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("FFC split ratio must lie in (0,1)");
}

template <typename Scalar>
DenetWeights<Scalar> DenetWeights<Scalar>::init(const DenetConfig& config, Rng& rng) {
  config.validate();
  DenetWeights w;
  w.config = config;
  const Index c1 = config.width, c2 = 2 * c1, c3 = 4 * c1;
  w.enc1_w = conv_weight<Scalar>(c1, 3, 3, rng);
  w.enc1_b = zeros_param<Scalar>({c1});
  w.enc2_w = conv_weight<Scalar>(c2, c1, 3, rng);
  w.enc2_b = zeros_param<Scalar>({c2});
  w.enc3_w = conv_weight<Scalar>(c3, c2, 3, rng);
  w.enc3_b = zeros_param<Scalar>({c3});
  for (Index i = 0; i < config.ffc_blocks; ++i) w.ffc.push_back(FfcBlockWeights<Scalar>::init(c3, config.alpha, rng));
  w.dec2_w = conv_weight<Scalar>(c2, c3, 3, rng);
  w.dec2_b = zeros_param<Scalar>({c2});
  w.dec1_w = conv_weight<Scalar>(c1, c2, 3, rng);
  w.dec1_b = zeros_param<Scalar>({c1});
  w.out_w = zeros_param<Scalar>({3, c1, 3, 3});
  w.out_b = zeros_param<Scalar>({3});
  return w;
}

template <typename Scalar>
Tensor<Scalar> denet_forward(const Tensor<Scalar>& image, const DenetWeights<Scalar>& w, StageTrace* trace) {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw InputError("DE-Net expects images [B,3,H,W], got " + shape_string(image.shape()));
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
    throw InputError("DE-Net needs H and W divisible by 4, got " + shape_string(image.shape()));
  auto note = [trace](const char* stage, const Tensor<Scalar>& t) {
    if (trace) trace->emplace_back(stage, t.shape());
  };
  const Tensor<Scalar> e1 = gelu(conv2d(image, w.enc1_w, w.enc1_b, 1, 1));
  note("enc1", e1);
  const Tensor<Scalar> e2 = gelu(conv2d(e1, w.enc2_w, w.enc2_b, 2, 1));
  note("enc2", e2);
  Tensor<Scalar> z = gelu(conv2d(e2, w.enc3_w, w.enc3_b, 2, 1));
  note("enc3", z);
  for (const auto& block : w.ffc) z = ffc_block(z, block);
  note("bottleneck", z);
  const Tensor<Scalar> d2 = add(gelu(conv2d(upsample_nearest2x(z), w.dec2_w, w.dec2_b, 1, 1)), e2);
  note("dec2", d2);
  const Tensor<Scalar> d1 = add(gelu(conv2d(upsample_nearest2x(d2), w.dec1_w, w.dec1_b, 1, 1)), e1);
  note("dec1", d1);
  const Tensor<Scalar> residual = conv2d(d1, w.out_w, w.out_b, 1, 1);
  note("out", residual);
  return clamp(add(image, residual), Scalar(0), Scalar(1));
}

#define BSM_INSTANTIATE_DENET(S)                                                         \
  template struct FfcBlockWeights<S>;                                                    \
  template struct DenetWeights<S>;                                                       \
  template Tensor<S> ffc_spectral_branch(const Tensor<S>&, const FfcBlockWeights<S>&);   \
  template Tensor<S> ffc_block(const Tensor<S>&, const FfcBlockWeights<S>&);             \
  template Tensor<S> denet_forward(const Tensor<S>&, const DenetWeights<S>&, StageTrace*);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_DENET)

}  // namespace bsm
