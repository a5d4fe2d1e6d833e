#ifndef LCRON_CASCADE_EVAL_HPP_
#define LCRON_CASCADE_EVAL_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcron/diffsort.hpp"
#include "lcron/losses.hpp"
#include "lcron/numerics.hpp"

namespace lcron {

/// Serving funnel: stage quotas (strictly decreasing) and ground-truth size K < q_T.
struct CascadeConfig {
  std::vector<std::size_t> quotas;
  std::size_t k = 1;

  std::size_t stages() const { return quotas.size(); }

  void validate() const {
    if (quotas.empty()) throw std::invalid_argument("CascadeConfig: no stages");
    for (std::size_t i = 1; i < quotas.size(); ++i) {
      if (quotas[i] >= quotas[i - 1]) {
        throw std::invalid_argument("CascadeConfig: quotas must be strictly decreasing");
      }
    }
    if (k < 1 || k >= quotas.back()) {
      throw std::invalid_argument("CascadeConfig: need 1 <= K < q_T");
    }
  }
};

/// Runs the hard funnel. Every score vector is indexed by item over the full
/// candidate list; stage i keeps the top-quotas[i] of the survivors of stage i-1.
/// Returns survivors of the last stage in that stage's descending order.
inline std::vector<std::size_t> cascade_filter(std::span<const Vector> stage_scores,
                                               std::span<const std::size_t> quotas) {
  if (stage_scores.empty() || stage_scores.size() != quotas.size()) {
    throw std::invalid_argument("cascade_filter: need one score vector per quota");
  }
  const std::size_t n = stage_scores.front().size();
  std::vector<std::size_t> alive(n);
  for (std::size_t i = 0; i < n; ++i) alive[i] = i;
  for (std::size_t s = 0; s < stage_scores.size(); ++s) {
    const Vector& scores = stage_scores[s];
    if (scores.size() != n) throw std::invalid_argument("cascade_filter: score length mismatch");
    if (quotas[s] > alive.size() || quotas[s] == 0) {
      throw std::invalid_argument("cascade_filter: quota " + std::to_string(quotas[s]) +
                                  " exceeds " + std::to_string(alive.size()) + " candidates");
    }
    Vector sub(alive.size());
    for (std::size_t i = 0; i < alive.size(); ++i) sub[i] = scores[alive[i]];
    const HardPermutation order = hard_sort_desc(sub);
    std::vector<std::size_t> next(quotas[s]);
    for (std::size_t i = 0; i < quotas[s]; ++i) next[i] = alive[order.order[i]];
    // Survivors go back to index order so the next stage breaks ties by index.
    if (s + 1 < stage_scores.size()) std::sort(next.begin(), next.end());
    alive = std::move(next);
  }
  return alive;
}

inline std::vector<std::size_t> cascade_filter(std::span<const Vector> stage_scores,
                                               const CascadeConfig& cfg) {
  return cascade_filter(stage_scores, cfg.quotas);
}

inline double recall_at(std::span<const std::size_t> selected, std::span<const std::size_t> gt) {
  if (gt.empty()) throw std::invalid_argument("recall_at: empty ground-truth set");
  std::size_t hit = 0;
  for (std::size_t g : gt) {
    if (std::find(selected.begin(), selected.end(), g) != selected.end()) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

/// NDCG@k with gain 2^grade - 1 and discount 1 / log2(rank + 1).
/// All-zero grades give 0.
inline double ndcg_at(std::span<const double> scores, std::span<const int> grades, std::size_t k) {
  if (scores.size() != grades.size()) throw std::invalid_argument("ndcg_at: length mismatch");
  if (k < 1 || k > scores.size()) throw std::invalid_argument("ndcg_at: k out of range");
  auto dcg = [&](const std::vector<std::size_t>& order) {
    double d = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      d += (std::exp2(grades[order[r]]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
    }
    return d;
  };
  Vector ideal_keys(grades.begin(), grades.end());
  const double ideal = dcg(hard_sort_desc(ideal_keys).order);
  if (ideal <= 0.0) return 0.0;
  return dcg(hard_sort_desc(scores).order) / ideal;
}

inline constexpr std::size_t kMaxEnumerationItems = 12;

namespace detail {

// Calls fn(mask) for every size-q subset of n items (as a bit mask).
template <typename Fn>
void for_each_subset(std::size_t n, std::size_t q, Fn&& fn) {
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) == q) fn(mask);
  }
}

inline void check_enumeration(std::span<const double> p1, std::span<const double> p2,
                              std::size_t q1, const char* who) {
  if (p1.size() != p2.size()) throw std::invalid_argument(std::string(who) + ": length mismatch");
  if (p1.size() > kMaxEnumerationItems) {
    throw std::invalid_argument(std::string(who) + ": enumeration limited to N <= 12");
  }
  if (q1 < 1 || q1 > p1.size()) throw std::invalid_argument(std::string(who) + ": q1 out of range");
}

}  // namespace detail

/// Inclusion probabilities E[pi] under the subset distribution
/// P(pi) proportional to prod_{i in pi} p1_i over |pi| = q1.
inline Vector inclusion_probabilities(std::span<const double> p1, std::size_t q1) {
  detail::check_enumeration(p1, p1, q1, "inclusion_probabilities");
  const std::size_t n = p1.size();
  Vector incl(n, 0.0);
  double z = 0.0;
  detail::for_each_subset(n, q1, [&](unsigned mask) {
    double w = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) w *= p1[i];
    }
    z += w;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) incl[i] += w;
    }
  });
  if (!(z > 0.0)) throw NumericalError("inclusion_probabilities: no subset has positive weight");
  for (double& x : incl) x /= z;
  return incl;
}

/// Exact two-stage survival probability by enumerating every first-stage
/// selection pi of size q1:
///   E_pi[ p2 * pi / (<pi, p2> / <1, p2>) ].
inline Vector exact_survival(std::span<const double> p1, std::span<const double> p2, std::size_t q1,
                             std::size_t q2) {
  detail::check_enumeration(p1, p2, q1, "exact_survival");
  if (q2 < 1 || q2 > q1) throw std::invalid_argument("exact_survival: q2 out of range");
  const std::size_t n = p1.size();
  const double total_p2 = sum(p2);
  Vector acc(n, 0.0);
  double z = 0.0;
  detail::for_each_subset(n, q1, [&](unsigned mask) {
    double w = 1.0;
    double inside = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) {
        w *= p1[i];
        inside += p2[i];
      }
    }
    if (w == 0.0) return;
    if (!(inside > 0.0)) throw NumericalError("exact_survival: <pi, p2> = 0 for a feasible pi");
    z += w;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) acc[i] += w * p2[i] * total_p2 / inside;
    }
  });
  if (!(z > 0.0)) throw NumericalError("exact_survival: no subset has positive weight");
  for (double& x : acc) x /= z;
  return acc;
}

/// Closed-form gap bound p2 * (q2 / <p1, p2> - 1).
inline Vector delta_prime(std::span<const double> p1, std::span<const double> p2, std::size_t q2) {
  const double overlap = dot(p1, p2);
  if (!(overlap > 0.0)) throw NumericalError("delta_prime: <p1, p2> = 0");
  Vector out(p2.size());
  for (std::size_t i = 0; i < p2.size(); ++i) {
    out[i] = p2[i] * (static_cast<double>(q2) / overlap - 1.0);
  }
  return out;
}

/// True when p1 is the binary indicator of the top-q1 entries of p2.
inline bool satisfies_argtopk_condition(std::span<const double> p1, std::span<const double> p2,
                                        std::size_t q1) {
  const HardPermutation order = hard_sort_desc(p2);
  Vector want(p2.size(), 0.0);
  for (std::size_t i = 0; i < q1; ++i) want[order.order[i]] = 1.0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    if (p1[i] != want[i]) return false;
  }
  return true;
}

struct GapReport {
  Vector exact_survival;
  Vector product_bound;
  Vector delta;
  Vector delta_prime;
  Vector inclusion;  // E[pi]; differs from p1 in general
  bool argtopk_condition = false;
};

inline GapReport bound_gap(std::span<const double> p1, std::span<const double> p2, std::size_t q1,
                           std::size_t q2) {
  GapReport r;
  r.delta_prime = lcron::delta_prime(p1, p2, q2);
  r.exact_survival = lcron::exact_survival(p1, p2, q1, q2);
  r.inclusion = inclusion_probabilities(p1, q1);
  r.product_bound.resize(p1.size());
  r.delta.resize(p1.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    r.product_bound[i] = p1[i] * p2[i];
    r.delta[i] = r.exact_survival[i] - r.product_bound[i];
  }
  r.argtopk_condition = satisfies_argtopk_condition(p1, p2, q1);
  return r;
}

}  // namespace lcron

#endif  // LCRON_CASCADE_EVAL_HPP_
