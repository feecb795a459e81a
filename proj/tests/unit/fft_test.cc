#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "missfpt/errors.h"
#include "missfpt/fft.h"

namespace missfpt {
namespace {

using Rng = std::mt19937_64;

std::vector<Complex> NaiveDft(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<Complex> out(n);
  for (size_t k = 0; k < n; ++k) {
    Complex acc = 0.0;
    for (size_t t = 0; t < n; ++t) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(t * k % n) / static_cast<double>(n);
      acc += x[t] * Complex(std::cos(angle), std::sin(angle));
    }
    out[k] = acc;
  }
  return out;
}

// Real and imaginary parts of the DFT matrix, entries cos/-sin(2 pi jk / n).
Matrix CosMatrix(Eigen::Index n) {
  Matrix c(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < n; ++k) c(j, k) = std::cos(2.0 * std::numbers::pi * static_cast<double>(j * k % n) / n);
  }
  return c;
}

Matrix SinMatrix(Eigen::Index n) {
  Matrix s(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < n; ++k) s(j, k) = -std::sin(2.0 * std::numbers::pi * static_cast<double>(j * k % n) / n);
  }
  return s;
}

std::vector<double> RandomVector(Rng& rng, size_t n) {
  std::normal_distribution<double> g;
  std::vector<double> x(n);
  for (double& v : x) v = g(rng);
  return x;
}

TEST(RealFft, Impulse) {
  EXPECT_EQ(RealFft(std::vector<double>{1, 0, 0, 0}), std::vector<double>({1, 1, 1, 1}));
}

TEST(RealFft, Constant) {
  const auto out = RealFft(std::vector<double>(6, 2.5));
  EXPECT_NEAR(out[0], 15.0, 1e-12);
  for (size_t i = 1; i < out.size(); ++i) EXPECT_NEAR(out[i], 0.0, 1e-12);
}

TEST(RealFft, EmptyThrows) { EXPECT_THROW(RealFft(std::vector<double>{}), ShapeError); }

TEST(Fft, MatchesNaiveDftLength8) {
  Rng rng(1);
  const auto x = RandomVector(rng, 8);
  std::vector<Complex> xc(x.begin(), x.end());
  const auto fast = Fft(xc);
  const auto slow = NaiveDft(x);
  for (size_t k = 0; k < 8; ++k) EXPECT_LT(std::abs(fast[k] - slow[k]), 1e-10);
}

TEST(Fft, MatchesNaiveDftAllLengths) {
  Rng rng(2);
  std::uniform_int_distribution<size_t> len(1, 64);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = RandomVector(rng, len(rng));
    std::vector<Complex> xc(x.begin(), x.end());
    const auto fast = Fft(xc);
    const auto slow = NaiveDft(x);
    for (size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(fast[k] - slow[k]));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Fft, ConjugateSymmetryForRealInput) {
  Rng rng(3);
  for (size_t n : {5u, 12u, 31u, 64u}) {
    const auto x = RandomVector(rng, n);
    const auto spectrum = Fft(std::vector<Complex>(x.begin(), x.end()));
    for (size_t k = 1; k < n; ++k) EXPECT_LT(std::abs(spectrum[k] - std::conj(spectrum[n - k])), 1e-10);
  }
}

TEST(InverseFftRoundtrip, Identity) {
  const auto out = InverseFftRoundtrip(std::vector<double>{1, 2, 3, 4});
  for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], i + 1.0, 1e-12);
  for (double v : InverseFftRoundtrip(std::vector<double>(7, 0.0))) EXPECT_EQ(v, 0.0);
}

TEST(InverseFftRoundtrip, RandomSweep) {
  Rng rng(4);
  std::uniform_int_distribution<size_t> len(1, 64);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = RandomVector(rng, len(rng));
    const auto y = InverseFftRoundtrip(x);
    for (size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  }
  EXPECT_LT(worst, 1e-10);
}

Matrix RandomMatrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> g;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

TEST(RealFftMatrix, MatchesDftMatrixOracle) {
  Rng rng(5);
  const Matrix x = RandomMatrix(rng, 6, 10);
  const Matrix ct = CosMatrix(6), cd = CosMatrix(10), st = SinMatrix(6), sd = SinMatrix(10);
  EXPECT_LT((RealFftMatrix(x, FftAxis::kChannel) - x * cd.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((RealFftMatrix(x, FftAxis::kToken) - ct * x).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix both = ct * x * cd.transpose() - st * x * sd.transpose();
  EXPECT_LT((RealFftMatrix(x, FftAxis::kBoth) - both).cwiseAbs().maxCoeff(), 1e-10);
}

// The input gradient of y = RealFftMatrix(x) for upstream g is the real-DFT
// operator transpose applied to g; check against the explicit matrix.
TEST(RealFftMatrix, GradientIsOperatorTranspose) {
  Rng rng(6);
  const Matrix g = RandomMatrix(rng, 5, 9);
  const Matrix ct = CosMatrix(5), cd = CosMatrix(9), st = SinMatrix(5), sd = SinMatrix(9);
  EXPECT_LT((RealFftMatrix(g, FftAxis::kChannel) - g * cd).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((RealFftMatrix(g, FftAxis::kToken) - ct.transpose() * g).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix both = ct.transpose() * g * cd - st.transpose() * g * sd;
  EXPECT_LT((RealFftMatrix(g, FftAxis::kBoth) - both).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RealFftMatrix, AdjointIdentity) {
  Rng rng(7);
  for (auto axis : {FftAxis::kChannel, FftAxis::kToken, FftAxis::kBoth}) {
    const Matrix x = RandomMatrix(rng, 7, 12), g = RandomMatrix(rng, 7, 12);
    const double lhs = (RealFftMatrix(x, axis).array() * g.array()).sum();
    const double rhs = (x.array() * RealFftMatrix(g, axis).array()).sum();
    EXPECT_NEAR(lhs, rhs, 1e-9);
  }
}

TEST(RealFftMatrix, EmptyThrows) { EXPECT_THROW(RealFftMatrix(Matrix(0, 3), FftAxis::kChannel), ShapeError); }

}  // namespace
}  // namespace missfpt
