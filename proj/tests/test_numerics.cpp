#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lcron/numerics.hpp"
#include "oracles.hpp"

namespace lcron {
namespace {

TEST(RowSoftmax, ZeroRowIsUniform) {
  const Matrix out = row_softmax(Matrix(1, 2, {0.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.5);
}

TEST(RowSoftmax, HandEvaluated) {
  const Matrix out = row_softmax(Matrix(1, 2, {1.0, 0.0}), 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(out(0, 0), e / (1.0 + e), 1e-15);
  EXPECT_NEAR(out(0, 1), 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(out(0, 0), 0.7311, 1e-4);
}

TEST(RowSoftmax, ExtremeLogitsDoNotOverflow) {
  const Matrix out = row_softmax(Matrix(1, 2, {1000.0, 0.0}), 1.0);
  EXPECT_TRUE(all_finite(out.data()));
  EXPECT_NEAR(out(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-15);
}

TEST(RowSoftmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(row_softmax(Matrix(1, 2), 0.0), std::invalid_argument);
  EXPECT_THROW(row_softmax(Matrix(1, 2), -1.0), std::invalid_argument);
}

TEST(RowSoftmax, RowsSumToOneAndTemperatureIsAScale) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> log_tau(-3.0, 3.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 9;
    Matrix logits = testing::random_matrix(rng, r, c);
    for (double& x : logits.data()) x *= 20.0;
    const double tau = std::pow(10.0, log_tau(rng));
    const Matrix a = row_softmax(logits, tau);
    Matrix scaled = logits;
    for (double& x : scaled.data()) x /= tau;
    const Matrix b = row_softmax(scaled, 1.0);
    for (std::size_t i = 0; i < r; ++i) {
      EXPECT_NEAR(sum(a.row(i)), 1.0, 1e-12);
      for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(a(i, j), b(i, j), 1e-12);
    }
  }
}

TEST(ClampedLog, ClampsBothEnds) {
  EXPECT_NEAR(clamped_log(0.5), std::log(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(clamped_log(0.0, 1e-7), std::log(1e-7));
  EXPECT_DOUBLE_EQ(clamped_log(1.0, 1e-7), std::log(1.0 - 1e-7));
  EXPECT_DOUBLE_EQ(clamped_log(-3.0, 1e-7), std::log(1e-7));
  EXPECT_LT(clamped_log(0.2), clamped_log(0.3));
}

TEST(GradCheck, QuadraticIsExact) {
  const ScalarFn f = [](const Vector& x) { return dot(x, x); };
  const GradientFn g = [](const Vector& x) { return Vector{2 * x[0], 2 * x[1]}; };
  EXPECT_LE(grad_check(f, g, {1.0, 2.0}, 1e-5), 1e-8);
}

TEST(GradCheck, AnyQuadraticPolynomial) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    const Matrix a = testing::random_matrix(rng, n, n);
    const Vector b = testing::random_vector(rng, n);
    const ScalarFn f = [&](const Vector& x) {
      double v = dot(b, x) + 0.3;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) v += a(i, j) * x[i] * x[j];
      return v;
    };
    const GradientFn g = [&](const Vector& x) {
      Vector out = b;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += (a(i, j) + a(j, i)) * x[j];
      return out;
    };
    EXPECT_LE(grad_check(f, g, testing::random_vector(rng, n), 1e-4), 1e-7);
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  const ScalarFn f = [](const Vector& x) { return x[0] * x[0]; };
  EXPECT_GT(grad_check(f, Vector{0.0}, Vector{1.0}), 1.0);
}

TEST(GradCheck, NonFiniteValueNamesCoordinate) {
  const ScalarFn f = [](const Vector& x) { return x[1] > 1.0 ? std::log(-1.0) : 0.0; };
  try {
    grad_check(f, Vector{0.0, 0.0}, Vector{0.0, 1.0});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

TEST(Stable, SoftplusAndSigmoid) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(800.0), 800.0, 1e-12);
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
}

}  // namespace
}  // namespace lcron
