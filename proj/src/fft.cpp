#include "bsm/fft.hpp"

#include "bsm/ops.hpp"
#include "record.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace bsm {

using detail::NodePtr;
using detail::record;

bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

template <typename Scalar>
void fft_inplace(std::span<std::complex<Scalar>> line, bool inverse) {
  const Index n = static_cast<Index>(line.size());
  if (!is_power_of_two(n))
    throw UnsupportedSizeError("FFT length " + std::to_string(n) + " is not a power of two");
  // Bit-reversal permutation.
  for (Index i = 1, j = 0; i < n; ++i) {
    Index bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(line[i], line[j]);
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (Index len = 2; len <= n; len <<= 1) {
    const double angle = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    for (Index start = 0; start < n; start += len) {
      for (Index k = 0; k < len / 2; ++k) {
        const std::complex<Scalar> w(static_cast<Scalar>(std::cos(angle * k)),
                                     static_cast<Scalar>(std::sin(angle * k)));
        const std::complex<Scalar> u = line[start + k];
        const std::complex<Scalar> v = line[start + k + len / 2] * w;
        line[start + k] = u + v;
        line[start + k + len / 2] = u - v;
      }
    }
  }
}

namespace {

struct PlaneGeometry {
  Index planes, height, width, bins;
};

PlaneGeometry real_geometry(const Shape& s, const char* op) {
  if (s.size() < 2) throw DimensionError(std::string(op) + " needs at least 2 dims, got " + shape_string(s));
  const Index h = s[s.size() - 2], w = s.back();
  if (!is_power_of_two(h) || !is_power_of_two(w) || w < 2)
    throw UnsupportedSizeError(std::string(op) + ": spatial size " + std::to_string(h) + "x" +
                               std::to_string(w) + " is not a power of two (width >= 2)");
  return {shape_numel(s) / (h * w), h, w, w / 2 + 1};
}

// Full 2-D transform of an H x W complex plane, row-major.
template <typename Scalar>
void fft2_plane(std::vector<std::complex<Scalar>>& plane, Index h, Index w, bool inverse) {
  for (Index y = 0; y < h; ++y) fft_inplace<Scalar>({plane.data() + y * w, static_cast<std::size_t>(w)}, inverse);
  std::vector<std::complex<Scalar>> column(h);
  for (Index x = 0; x < w; ++x) {
    for (Index y = 0; y < h; ++y) column[y] = plane[y * w + x];
    fft_inplace<Scalar>(column, inverse);
    for (Index y = 0; y < h; ++y) plane[y * w + x] = column[y];
  }
}

// Forward half spectrum of real planes; `scale_col(l)` multiplies each bin column.
template <typename Scalar, typename ColumnScale>
void rfft2_raw(const Scalar* in, const PlaneGeometry& g, Scalar* re, Scalar* im,
               ColumnScale scale_col) {
  std::vector<std::complex<Scalar>> plane(g.height * g.width);
  for (Index p = 0; p < g.planes; ++p) {
    const Scalar* src = in + p * g.height * g.width;
    for (Index i = 0; i < g.height * g.width; ++i) plane[i] = {src[i], Scalar(0)};
    fft2_plane(plane, g.height, g.width, false);
    for (Index y = 0; y < g.height; ++y)
      for (Index l = 0; l < g.bins; ++l) {
        const Index o = (p * g.height + y) * g.bins + l;
        const Scalar c = scale_col(l);
        re[o] = plane[y * g.width + l].real() * c;
        im[o] = plane[y * g.width + l].imag() * c;
      }
  }
}

template <typename Scalar>
void irfft2_raw(const Scalar* re, const Scalar* im, const PlaneGeometry& g, Scalar* out) {
  std::vector<std::complex<Scalar>> half(g.height * g.bins);
  std::vector<std::complex<Scalar>> column(g.height);
  std::vector<std::complex<Scalar>> row(g.width);
  const Scalar inv_h = Scalar(1) / static_cast<Scalar>(g.height);
  const Scalar inv_w = Scalar(1) / static_cast<Scalar>(g.width);
  for (Index p = 0; p < g.planes; ++p) {
    const Index base = p * g.height * g.bins;
    for (Index l = 0; l < g.bins; ++l) {
      for (Index y = 0; y < g.height; ++y) column[y] = {re[base + y * g.bins + l], im[base + y * g.bins + l]};
      fft_inplace<Scalar>(column, true);
      for (Index y = 0; y < g.height; ++y) half[y * g.bins + l] = column[y] * inv_h;
    }
    const Index nyquist = g.width / 2;
    for (Index y = 0; y < g.height; ++y) {
      const auto* z = half.data() + y * g.bins;
      row[0] = {z[0].real(), Scalar(0)};
      row[nyquist] = {z[nyquist].real(), Scalar(0)};
      for (Index l = 1; l < nyquist; ++l) {
        row[l] = z[l];
        row[g.width - l] = std::conj(z[l]);
      }
      fft_inplace<Scalar>(row, true);
      Scalar* dst = out + (p * g.height + y) * g.width;
      for (Index x = 0; x < g.width; ++x) dst[x] = row[x].real() * inv_w;
    }
  }
}

}  // namespace

template <typename Scalar>
ComplexPair<Scalar> fft2_real(const Tensor<Scalar>& x) {
  const PlaneGeometry g = real_geometry(x.shape(), "fft2_real");
  Shape out_shape = x.shape();
  out_shape.back() = g.bins;
  const Index n = g.planes * g.height * g.bins;
  Vector<Scalar> re(n), im(n);
  rfft2_raw(x.values().data(), g, re.data(), im.data(), [](Index) { return Scalar(1); });

  // Both planes come from one shared transform node so that gradients from
  // the real and imaginary outputs combine before the adjoint runs.
  Vector<Scalar> packed(2 * n);
  packed << re, im;
  NodePtr<Scalar> nx = x.node();
  Shape packed_shape = out_shape;
  packed_shape.insert(packed_shape.begin(), 2);
  Tensor<Scalar> both = record<Scalar>(
      "fft2_real", std::move(packed_shape), std::move(packed), {nx},
      [nx, g, n](const Vector<Scalar>& grad) {
        // dx = Re(unnormalized inverse DFT of the zero-extended half spectrum).
        std::vector<std::complex<Scalar>> plane(g.height * g.width);
        auto& gx = nx->grad_buffer();
        for (Index p = 0; p < g.planes; ++p) {
          std::fill(plane.begin(), plane.end(), std::complex<Scalar>(0, 0));
          for (Index y = 0; y < g.height; ++y)
            for (Index l = 0; l < g.bins; ++l) {
              const Index o = (p * g.height + y) * g.bins + l;
              plane[y * g.width + l] = {grad[o], grad[n + o]};
            }
          fft2_plane(plane, g.height, g.width, true);
          for (Index i = 0; i < g.height * g.width; ++i)
            gx[p * g.height * g.width + i] += plane[i].real();
        }
      });
  // Split the packed node into its two planes (differentiable views).
  auto parts = split(both, {1, 1}, 0);
  return {reshape(parts[0], out_shape), reshape(parts[1], out_shape)};
}

template <typename Scalar>
Tensor<Scalar> ifft2_real(const ComplexPair<Scalar>& spectrum) {
  const Shape& s = spectrum.real.shape();
  if (s != spectrum.imag.shape())
    throw DimensionError("ifft2_real: real plane " + shape_string(s) + " vs imaginary plane " +
                         shape_string(spectrum.imag.shape()));
  if (s.size() < 2 || s.back() < 2)
    throw UnsupportedSizeError("ifft2_real: half spectrum " + shape_string(s) + " too small");
  Shape out_shape = s;
  out_shape.back() = 2 * (s.back() - 1);
  const PlaneGeometry g = real_geometry(out_shape, "ifft2_real");
  Vector<Scalar> out(shape_numel(out_shape));
  irfft2_raw(spectrum.real.values().data(), spectrum.imag.values().data(), g, out.data());
  NodePtr<Scalar> nr = spectrum.real.node(), ni = spectrum.imag.node();
  return record<Scalar>(
      "ifft2_real", std::move(out_shape), std::move(out), {nr, ni},
      [nr, ni, g](const Vector<Scalar>& grad) {
        // Adjoint: (c_l / (H W)) * rfft2(grad), c_l = 1 on DC/Nyquist columns, else 2.
        const Index n = g.planes * g.height * g.bins;
        Vector<Scalar> re(n), im(n);
        const Scalar norm = Scalar(1) / static_cast<Scalar>(g.height * g.width);
        const Index nyquist = g.width / 2;
        rfft2_raw(grad.data(), g, re.data(), im.data(), [&](Index l) {
          return (l == 0 || l == nyquist) ? norm : Scalar(2) * norm;
        });
        if (nr->requires_grad) nr->grad_buffer() += re;
        if (ni->requires_grad) ni->grad_buffer() += im;
      });
}

template <typename Scalar>
double full_spectrum_energy(const ComplexPair<Scalar>& spectrum) {
  const Shape& s = spectrum.real.shape();
  const Index bins = s.back();
  const Index nyquist = bins - 1;
  double total = 0.0;
  const auto& re = spectrum.real.values();
  const auto& im = spectrum.imag.values();
  for (Index i = 0; i < re.size(); ++i) {
    const Index l = i % bins;
    const double weight = (l == 0 || l == nyquist) ? 1.0 : 2.0;
    total += weight * (static_cast<double>(re[i]) * re[i] + static_cast<double>(im[i]) * im[i]);
  }
  return total;
}

#define BSM_INSTANTIATE_FFT(S)                                                  \
  template void fft_inplace(std::span<std::complex<S>>, bool);                  \
  template ComplexPair<S> fft2_real(const Tensor<S>&);                          \
  template Tensor<S> ifft2_real(const ComplexPair<S>&);                         \
  template double full_spectrum_energy(const ComplexPair<S>&);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_FFT)

}  // namespace bsm
