#ifndef LCRON_DIFFSORT_HPP_
#define LCRON_DIFFSORT_HPP_

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lcron/numerics.hpp"

namespace lcron {

enum class SortOperator { kNeuralSort, kSoftSort };

inline std::string_view to_string(SortOperator op) {
  return op == SortOperator::kNeuralSort ? "neural_sort" : "soft_sort";
}

inline SortOperator parse_sort_operator(std::string_view name) {
  if (name == "neural_sort" || name == "neuralsort") return SortOperator::kNeuralSort;
  if (name == "soft_sort" || name == "softsort") return SortOperator::kSoftSort;
  throw std::invalid_argument("unknown sort operator: " + std::string(name));
}

/// Row-stochastic relaxation of the descending-sort permutation matrix.
/// Entry (i, j) is the soft probability that item j holds rank i.
struct SoftPermutation {
  Matrix matrix;
  double temperature = 1.0;
  SortOperator kind = SortOperator::kNeuralSort;

  std::size_t size() const { return matrix.rows(); }
};

/// Descending order of item indices; ties keep the lower index first.
struct HardPermutation {
  std::vector<std::size_t> order;

  /// Binary permutation matrix with P[i][order[i]] = 1.
  Matrix as_matrix() const {
    Matrix m(order.size(), order.size());
    for (std::size_t i = 0; i < order.size(); ++i) m(i, order[i]) = 1.0;
    return m;
  }
};

inline HardPermutation hard_sort_desc(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("hard_sort_desc: empty scores");
  HardPermutation p;
  p.order.resize(scores.size());
  std::iota(p.order.begin(), p.order.end(), std::size_t{0});
  std::stable_sort(p.order.begin(), p.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return p;
}

namespace detail {

inline double sign(double x) { return (x > 0.0) - (x < 0.0); }

inline void check_sort_inputs(std::span<const double> scores, double temperature,
                              const char* who) {
  if (scores.empty()) throw std::invalid_argument(std::string(who) + ": empty scores");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument(std::string(who) + ": temperature must be positive");
  }
  require_finite(scores, who);
}

// NeuralSort logits, unscaled: row i (0-based) is (n - 1 - 2i) * s - A 1.
inline Matrix neural_sort_logits(std::span<const double> s) {
  const std::size_t n = s.size();
  Vector abs_row_sum(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) abs_row_sum[j] += std::abs(s[j] - s[k]);
  }
  Matrix logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = static_cast<double>(n) - 1.0 - 2.0 * static_cast<double>(i);
    for (std::size_t j = 0; j < n; ++j) logits(i, j) = scale * s[j] - abs_row_sum[j];
  }
  return logits;
}

// SoftSort logits, unscaled: -|sorted_desc(s)_i - s_j|.
inline Matrix soft_sort_logits(std::span<const double> s, const HardPermutation& hard) {
  const std::size_t n = s.size();
  Matrix logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double anchor = s[hard.order[i]];
    for (std::size_t j = 0; j < n; ++j) logits(i, j) = -std::abs(anchor - s[j]);
  }
  return logits;
}

}  // namespace detail

inline SoftPermutation neural_sort(std::span<const double> scores, double temperature) {
  detail::check_sort_inputs(scores, temperature, "neural_sort");
  return {row_softmax(detail::neural_sort_logits(scores), temperature), temperature,
          SortOperator::kNeuralSort};
}

inline SoftPermutation soft_sort(std::span<const double> scores, double temperature) {
  detail::check_sort_inputs(scores, temperature, "soft_sort");
  return {row_softmax(detail::soft_sort_logits(scores, hard_sort_desc(scores)), temperature),
          temperature, SortOperator::kSoftSort};
}

inline SoftPermutation soft_permutation(SortOperator op, std::span<const double> scores,
                                        double temperature) {
  return op == SortOperator::kNeuralSort ? neural_sort(scores, temperature)
                                         : soft_sort(scores, temperature);
}

/// Gradient of sum_ij upstream[i][j] * P[i][j] with respect to the scores.
/// The |s_i - s_j| subgradient is taken as 0 at ties.
inline Vector pullback(SortOperator op, std::span<const double> scores, double temperature,
                       const Matrix& upstream) {
  const std::size_t n = scores.size();
  if (upstream.rows() != n || upstream.cols() != n) {
    throw std::invalid_argument("pullback: upstream shape does not match scores");
  }
  const SoftPermutation perm = soft_permutation(op, scores, temperature);

  // dL/dlogits, including the 1/temperature factor.
  Matrix d_logits(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    softmax_row_backward(perm.matrix.row(i), upstream.row(i), d_logits.row(i));
    for (double& g : d_logits.row(i)) g /= temperature;
  }

  Vector grad(n, 0.0);
  if (op == SortOperator::kNeuralSort) {
    Vector col_sum(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = static_cast<double>(n) - 1.0 - 2.0 * static_cast<double>(i);
      for (std::size_t j = 0; j < n; ++j) {
        grad[j] += scale * d_logits(i, j);
        col_sum[j] += d_logits(i, j);
      }
    }
    // d(-sum_k |s_j - s_k|): contributes -sign(s_j - s_k) to s_j and +sign to s_k.
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) {
        grad[j] -= (col_sum[j] + col_sum[k]) * detail::sign(scores[j] - scores[k]);
      }
    }
  } else {
    const HardPermutation hard = hard_sort_desc(scores);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t anchor = hard.order[i];
      for (std::size_t j = 0; j < n; ++j) {
        const double g = d_logits(i, j) * detail::sign(scores[anchor] - scores[j]);
        grad[anchor] -= g;
        grad[j] += g;
      }
    }
  }
  return grad;
}

}  // namespace lcron

#endif  // LCRON_DIFFSORT_HPP_
