#include "bsm/denet.hpp"
#include "bsm/errors.hpp"
#include "bsm/fft.hpp"
#include "bsm/ops.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

using namespace bsm;
using bsm::testing::gradient_error;
using bsm::testing::T;

namespace {

// Direct O(N^4) DFT of an h x w plane, bins l = 0..w/2.
std::vector<std::complex<double>> direct_dft(const double* x, Index h, Index w) {
  std::vector<std::complex<double>> out;
  for (Index k = 0; k < h; ++k)
    for (Index l = 0; l <= w / 2; ++l) {
      std::complex<double> s = 0;
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx)
          s += x[y * w + xx] * std::polar(1.0, -2 * std::numbers::pi * (double(k * y) / h + double(l * xx) / w));
      out.push_back(s);
    }
  return out;
}

}  // namespace

TEST_CASE("impulse and constant spectra") {
  T impulse = T::zeros({4, 4});
  impulse.mutable_values()[0] = 1;
  const auto f = fft2_real(impulse);
  CHECK(f.real.shape() == Shape{4, 3});
  CHECK((f.real.values().array() == 1.0).all());
  CHECK((f.imag.values().array() == 0.0).all());

  const auto c = fft2_real(T::full({8, 8}, 0.25));
  CHECK(c.real.values()[0] == doctest::Approx(0.25 * 64));
  CHECK(c.real.values().tail(c.real.numel() - 1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(c.imag.values().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fft2_real matches a direct DFT") {
  Rng rng(1);
  const T x = uniform<double>({8, 16}, -1, 1, rng);
  const auto f = fft2_real(x);
  const auto want = direct_dft(x.values().data(), 8, 16);
  for (Index i = 0; i < f.real.numel(); ++i) {
    CHECK(std::abs(f.real.values()[i] - want[i].real()) < 1e-10);
    CHECK(std::abs(f.imag.values()[i] - want[i].imag()) < 1e-10);
  }
}

TEST_CASE("round trip and Parseval") {
  Rng rng(2);
  for (Index n : {8, 16}) {
    const T x = uniform<double>({2, n, n}, -1, 1, rng);
    const auto f = fft2_real(x);
    CHECK(testing::max_abs_diff(ifft2_real(f), x) < 1e-10);
    // Energy from the direct DFT, mirrored bins counted twice.
    double spectral = 0;
    const auto want = direct_dft(x.values().data(), n, n);
    for (Index k = 0; k < n; ++k)
      for (Index l = 0; l <= n / 2; ++l) spectral += (l == 0 || l == n / 2 ? 1 : 2) * std::norm(want[k * (n / 2 + 1) + l]);
    const double spatial = x.values().head(n * n).squaredNorm();
    CHECK(std::abs(spectral / double(n * n) - spatial) / spatial < 1e-9);
    const double lib = full_spectrum_energy(f) / double(n * n);
    CHECK(std::abs(lib - x.values().squaredNorm()) / x.values().squaredNorm() < 1e-9);
  }
}

TEST_CASE("non power-of-two sizes are rejected") {
  CHECK_THROWS_AS(fft2_real(T::zeros({6, 8})), UnsupportedSizeError);
  CHECK_THROWS_AS(fft2_real(T::zeros({8, 12})), UnsupportedSizeError);
}

TEST_CASE("spectral transforms are differentiable") {
  Rng rng(3);
  T x = uniform<double>({1, 8, 8}, -1, 1, rng);
  const T wr = uniform<double>({1, 8, 5}, -1, 1, rng), wi = uniform<double>({1, 8, 5}, -1, 1, rng);
  CHECK(gradient_error([&] {
          const auto f = fft2_real(x);
          return add(sum(mul(f.real, wr)), sum(mul(f.imag, wi)));
        },
                       {x}) < 1e-6);
  T re = uniform<double>({8, 5}, -1, 1, rng), im = uniform<double>({8, 5}, -1, 1, rng);
  const T r = uniform<double>({8, 8}, -1, 1, rng);
  CHECK(gradient_error([&] { return sum(mul(ifft2_real(ComplexPair<double>{re, im}), r)); }, {re, im}) < 1e-6);
}

TEST_CASE("identity spectral weights make the spectral branch the identity") {
  Rng rng(4);
  auto w = FfcBlockWeights<double>::init(8, 0.5, rng);
  w.set_identity_spectral();
  const T x = uniform<double>({2, w.global_channels, 8, 8}, -1, 1, rng);
  const T y = ffc_spectral_branch(x, w);
  CHECK(testing::max_abs_diff(y, x) < 1e-10);
  CHECK(std::abs(y.values().squaredNorm() - x.values().squaredNorm()) / x.values().squaredNorm() < 1e-9);
}
