#pragma once

#include <complex>
#include <span>
#include <vector>

#include "missfpt/tensor.h"

namespace missfpt {

using Complex = std::complex<double>;

// Mixed-radix decimation-in-time DFT, X_k = sum_n x_n exp(-2 pi i n k / N).
// Prime factors fall back to a direct sum. Throws ShapeError on empty input.
std::vector<Complex> Fft(std::span<const Complex> x);

// x_n = (1/N) sum_k X_k exp(+2 pi i n k / N).
std::vector<Complex> InverseFft(std::span<const Complex> spectrum);

// Re(FFT(x)) for real x.
std::vector<double> RealFft(std::span<const double> x);

// Re(IFFT(FFT(x))); the identity up to rounding. Verification only.
std::vector<double> InverseFftRoundtrip(std::span<const double> x);

enum class FftAxis { kChannel, kToken, kBoth };

// Real part of the DFT of a token matrix along the chosen axis: per row
// (channel), per column (token), or the 2-D transform (both).
//
// Every variant is a real symmetric linear operator, so the same call also
// maps an upstream gradient to the input gradient.
Matrix RealFftMatrix(const Matrix& x, FftAxis axis);

}  // namespace missfpt
