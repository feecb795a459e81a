#include "missfpt/fft.h"

#include <cmath>
#include <numbers>

#include "missfpt/errors.h"

namespace missfpt {
namespace {

int SmallestFactor(int n) {
  if (n % 2 == 0) return 2;
  for (int f = 3; f * f <= n; f += 2) {
    if (n % f == 0) return f;
  }
  return n;
}

// exp(sign * 2 pi i * k / n), with k reduced mod n for accuracy.
Complex Twiddle(long long k, int n, double sign) {
  const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k % n) / n;
  return {std::cos(angle), std::sin(angle)};
}

void Transform(std::span<const Complex> x, std::span<Complex> out, double sign) {
  const int n = static_cast<int>(x.size());
  if (n == 1) {
    out[0] = x[0];
    return;
  }
  const int p = SmallestFactor(n);
  if (p == n) {
    for (int k = 0; k < n; ++k) {
      Complex acc = 0.0;
      for (int j = 0; j < n; ++j) acc += x[static_cast<size_t>(j)] * Twiddle(1LL * j * k, n, sign);
      out[static_cast<size_t>(k)] = acc;
    }
    return;
  }
  // Split into p interleaved subsequences of length n/p.
  const int m = n / p;
  std::vector<Complex> sub(static_cast<size_t>(m)), sub_out(static_cast<size_t>(n));
  for (int r = 0; r < p; ++r) {
    for (int j = 0; j < m; ++j) sub[static_cast<size_t>(j)] = x[static_cast<size_t>(j * p + r)];
    Transform(sub, std::span<Complex>(sub_out).subspan(static_cast<size_t>(r * m), static_cast<size_t>(m)), sign);
  }
  for (int k = 0; k < n; ++k) {
    Complex acc = 0.0;
    for (int r = 0; r < p; ++r) {
      acc += Twiddle(1LL * r * k, n, sign) * sub_out[static_cast<size_t>(r * m + k % m)];
    }
    out[static_cast<size_t>(k)] = acc;
  }
}

void RequireNonEmpty(size_t n) {
  if (n == 0) throw ShapeError("FFT of an empty sequence");
}

Matrix RealFftRows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  std::vector<Complex> row(static_cast<size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<size_t>(j)] = x(i, j);
    const auto spec = Fft(row);
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = spec[static_cast<size_t>(j)].real();
  }
  return out;
}

}  // namespace

std::vector<Complex> Fft(std::span<const Complex> x) {
  RequireNonEmpty(x.size());
  std::vector<Complex> out(x.size());
  Transform(x, out, -1.0);
  return out;
}

std::vector<Complex> InverseFft(std::span<const Complex> spectrum) {
  RequireNonEmpty(spectrum.size());
  std::vector<Complex> out(spectrum.size());
  Transform(spectrum, out, +1.0);
  const double inv_n = 1.0 / static_cast<double>(spectrum.size());
  for (auto& v : out) v *= inv_n;
  return out;
}

std::vector<double> RealFft(std::span<const double> x) {
  RequireNonEmpty(x.size());
  std::vector<Complex> in(x.begin(), x.end());
  const auto spec = Fft(in);
  std::vector<double> out(x.size());
  for (size_t k = 0; k < x.size(); ++k) out[k] = spec[k].real();
  return out;
}

std::vector<double> InverseFftRoundtrip(std::span<const double> x) {
  if (x.empty()) return {};
  std::vector<Complex> in(x.begin(), x.end());
  const auto back = InverseFft(Fft(in));
  std::vector<double> out(x.size());
  for (size_t k = 0; k < x.size(); ++k) out[k] = back[k].real();
  return out;
}

Matrix RealFftMatrix(const Matrix& x, FftAxis axis) {
  if (x.rows() == 0 || x.cols() == 0) throw ShapeError("FFT of an empty token matrix");
  switch (axis) {
    case FftAxis::kChannel:
      return RealFftRows(x);
    case FftAxis::kToken: {
      Matrix t = x.transpose();
      return RealFftRows(t).transpose();
    }
    case FftAxis::kBoth: {
      // Full complex row transform, then column transform, keep the real part.
      const auto rows = x.rows(), cols = x.cols();
      std::vector<Complex> grid(static_cast<size_t>(rows * cols));
      std::vector<Complex> line(static_cast<size_t>(cols));
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) line[static_cast<size_t>(j)] = x(i, j);
        const auto spec = Fft(line);
        for (Eigen::Index j = 0; j < cols; ++j) grid[static_cast<size_t>(i * cols + j)] = spec[static_cast<size_t>(j)];
      }
      Matrix out(rows, cols);
      line.resize(static_cast<size_t>(rows));
      for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) line[static_cast<size_t>(i)] = grid[static_cast<size_t>(i * cols + j)];
        const auto spec = Fft(line);
        for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = spec[static_cast<size_t>(i)].real();
      }
      return out;
    }
  }
  throw ShapeError("unknown FFT axis");
}

}  // namespace missfpt
