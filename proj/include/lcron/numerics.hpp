#ifndef LCRON_NUMERICS_HPP_
#define LCRON_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcron {

using Vector = std::vector<double>;

/// Raised when a computation produces a value it cannot represent (NaN/Inf,
/// zero denominators). Argument problems use std::invalid_argument.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length != rows * cols");
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> xs, const char* what) {
  if (!all_finite(xs)) {
    throw std::invalid_argument(std::string(what) + ": non-finite entry");
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sum(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x;
  return s;
}

/// In-place softmax of one row after dividing by `temperature`.
inline void softmax_inplace(std::span<double> row, double temperature) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : row) mx = std::max(mx, x);
  double z = 0.0;
  for (double& x : row) {
    x = std::exp((x - mx) / temperature);
    z += x;
  }
  for (double& x : row) x /= z;
}

/// Row-wise softmax of logits / temperature, max-subtracted per row.
inline Matrix row_softmax(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("row_softmax: temperature must be positive");
  }
  Matrix out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r), temperature);
  return out;
}

/// Backward of a row softmax: given the softmax output and dL/d(output),
/// returns dL/d(logits) for one row (before the 1/temperature scale).
inline void softmax_row_backward(std::span<const double> probs,
                                 std::span<const double> upstream,
                                 std::span<double> d_logits) {
  const double inner = dot(probs, upstream);
  for (std::size_t j = 0; j < probs.size(); ++j) {
    d_logits[j] = probs[j] * (upstream[j] - inner);
  }
}

inline constexpr double kDefaultLogEpsilon = 1e-7;

/// ln(clamp(x, epsilon, 1 - epsilon)).
inline double clamped_log(double x, double epsilon = kDefaultLogEpsilon) {
  return std::log(std::clamp(x, epsilon, 1.0 - epsilon));
}

/// d/dx of clamped_log; zero where the clamp is active.
inline double clamped_log_derivative(double x, double epsilon = kDefaultLogEpsilon) {
  if (x < epsilon || x > 1.0 - epsilon) return 0.0;
  return 1.0 / x;
}

/// Numerically stable ln(1 + e^x).
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using ScalarFn = std::function<double(const Vector&)>;
using GradientFn = std::function<Vector(const Vector&)>;

/// Max over coordinates of |central difference - analytic| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Vector& analytic, const Vector& point,
                         double step = 1e-5) {
  if (analytic.size() != point.size()) {
    throw std::invalid_argument("grad_check: gradient and point differ in length");
  }
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Vector x = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f(x);
    x[i] = saved - step;
    const double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("grad_check: non-finite function value at coordinate " +
                           std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

inline double grad_check(const ScalarFn& f, const GradientFn& analytic_grad, const Vector& point,
                         double step = 1e-5) {
  return grad_check(f, analytic_grad(point), point, step);
}

}  // namespace lcron

#endif  // LCRON_NUMERICS_HPP_
