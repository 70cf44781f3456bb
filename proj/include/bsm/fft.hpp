#pragma once

// Radix-2 FFT and differentiable real 2-D transforms over the two trailing
// axes of a tensor.

#include "bsm/tensor.hpp"

#include <complex>
#include <span>

namespace bsm {

bool is_power_of_two(Index n);

/// Unnormalized in-place transform; `inverse` flips the exponent sign only.
/// Throws UnsupportedSizeError for non power-of-two lengths.
template <typename Scalar>
void fft_inplace(std::span<std::complex<Scalar>> line, bool inverse);

/// Real and imaginary planes of a half spectrum, each [..., H, W/2+1].
template <typename Scalar>
struct ComplexPair {
  Tensor<Scalar> real;
  Tensor<Scalar> imag;
};

/// [..., H, W] real -> half spectrum [..., H, W/2+1]. H and W must be powers of two.
template <typename Scalar>
ComplexPair<Scalar> fft2_real(const Tensor<Scalar>& x);

/// Inverse of fft2_real; the output width is 2*(bins-1). Imaginary parts of
/// the DC and Nyquist columns are ignored after the column transform, the
/// usual half-spectrum convention.
template <typename Scalar>
Tensor<Scalar> ifft2_real(const ComplexPair<Scalar>& spectrum);

/// Sum of |F|^2 over the full spectrum implied by a half spectrum (Hermitian
/// columns counted twice). Parseval: equals N * sum(x^2).
template <typename Scalar>
double full_spectrum_energy(const ComplexPair<Scalar>& spectrum);

}  // namespace bsm
