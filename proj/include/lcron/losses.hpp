#ifndef LCRON_LOSSES_HPP_
#define LCRON_LOSSES_HPP_

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "lcron/diffsort.hpp"
#include "lcron/numerics.hpp"

namespace lcron {

/// Soft probability that each item lands in the top-q set of one stage.
/// `column_sums` are the normalizers of the soft permutation; they are
/// treated as constants by the backward pass.
struct TopKProbability {
  Vector probs;
  std::size_t quota = 0;
  Vector column_sums;
};

inline TopKProbability topk_select_prob(const SoftPermutation& perm, std::size_t q) {
  const std::size_t n = perm.size();
  if (q < 1 || q > n) throw std::invalid_argument("topk_select_prob: quota out of range");
  TopKProbability out{Vector(n, 0.0), q, Vector(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.column_sums[j] += perm.matrix(i, j);
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!(out.column_sums[j] > 0.0)) {
      throw NumericalError("topk_select_prob: zero column sum in soft permutation");
    }
    double head = 0.0;
    for (std::size_t i = 0; i < q; ++i) head += perm.matrix(i, j);
    out.probs[j] = head / out.column_sums[j];
  }
  return out;
}

/// Binary top-q indicator of a hard permutation.
inline TopKProbability topk_select_prob(const HardPermutation& perm, std::size_t q) {
  const std::size_t n = perm.order.size();
  if (q < 1 || q > n) throw std::invalid_argument("topk_select_prob: quota out of range");
  TopKProbability out{Vector(n, 0.0), q, Vector(n, 1.0)};
  for (std::size_t i = 0; i < q; ++i) out.probs[perm.order[i]] = 1.0;
  return out;
}

/// dL/dP for the soft permutation given dL/dprobs (stop-gradient on the normalizer).
inline Matrix topk_backward(const TopKProbability& topk, std::span<const double> d_probs) {
  const std::size_t n = topk.probs.size();
  Matrix d_perm(n, n);
  for (std::size_t i = 0; i < topk.quota; ++i) {
    for (std::size_t j = 0; j < n; ++j) d_perm(i, j) = d_probs[j] / topk.column_sums[j];
  }
  return d_perm;
}

inline Vector joint_survival(std::span<const TopKProbability> stages) {
  if (stages.empty()) throw std::invalid_argument("joint_survival: no stages");
  Vector p = stages.front().probs;
  for (std::size_t s = 1; s < stages.size(); ++s) {
    if (stages[s].probs.size() != p.size()) {
      throw std::invalid_argument("joint_survival: stage length mismatch");
    }
    for (std::size_t j = 0; j < p.size(); ++j) p[j] *= stages[s].probs[j];
  }
  return p;
}

/// Loss value plus gradients with respect to each stage's score vector.
/// `fusion_grads` holds d(value)/d(log sigma) for trainable fusion weights.
struct LossOutput {
  double value = 0.0;
  std::vector<Vector> grads_per_stage;
  Vector fusion_grads;
};

namespace detail {

inline void check_flags(std::span<const double> flags, std::size_t n, const char* who) {
  if (flags.size() != n) throw std::invalid_argument(std::string(who) + ": label length mismatch");
  for (double y : flags) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument(std::string(who) + ": labels must be 0/1");
  }
}

// Summed binary cross-entropy with clamped logs; writes dL/dp.
inline double clamped_cross_entropy(std::span<const double> p, std::span<const double> y,
                                    std::span<double> d_p, double epsilon) {
  double value = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    value -= y[j] * clamped_log(p[j], epsilon) + (1.0 - y[j]) * clamped_log(1.0 - p[j], epsilon);
    d_p[j] = -y[j] * clamped_log_derivative(p[j], epsilon) +
             (1.0 - y[j]) * clamped_log_derivative(1.0 - p[j], epsilon);
  }
  return value;
}

}  // namespace detail

struct SoftLossOptions {
  double temperature = 1.0;
  SortOperator op = SortOperator::kNeuralSort;
  double log_epsilon = kDefaultLogEpsilon;
};

/// End-to-end survival loss: cross-entropy of the product of per-stage
/// soft top-q probabilities against the ground-truth flags.
inline LossOutput loss_e2e(std::span<const Vector> stage_scores,
                           std::span<const std::size_t> train_quotas,
                           std::span<const double> gt_flags, const SoftLossOptions& opt = {}) {
  if (stage_scores.empty()) throw std::invalid_argument("loss_e2e: no stages");
  if (train_quotas.size() != stage_scores.size()) {
    throw std::invalid_argument("loss_e2e: one training quota per stage required");
  }
  const std::size_t n = stage_scores.front().size();
  detail::check_flags(gt_flags, n, "loss_e2e");

  std::vector<TopKProbability> stages;
  stages.reserve(stage_scores.size());
  for (std::size_t s = 0; s < stage_scores.size(); ++s) {
    if (stage_scores[s].size() != n) throw std::invalid_argument("loss_e2e: stage length mismatch");
    stages.push_back(
        topk_select_prob(soft_permutation(opt.op, stage_scores[s], opt.temperature), train_quotas[s]));
  }
  const Vector p = joint_survival(stages);

  LossOutput out;
  Vector d_p(n);
  out.value = detail::clamped_cross_entropy(p, gt_flags, d_p, opt.log_epsilon);

  for (std::size_t s = 0; s < stages.size(); ++s) {
    Vector d_stage(n);
    for (std::size_t j = 0; j < n; ++j) {
      double others = 1.0;
      for (std::size_t t = 0; t < stages.size(); ++t) {
        if (t != s) others *= stages[t].probs[j];
      }
      d_stage[j] = d_p[j] * others;
    }
    out.grads_per_stage.push_back(pullback(opt.op, stage_scores[s], opt.temperature,
                                           topk_backward(stages[s], d_stage)));
  }
  return out;
}

/// Single-stage auxiliary loss: cross-entropy of the soft top-K probability
/// of one model against the ground-truth flags.
inline LossOutput loss_single(std::span<const double> scores, std::size_t k,
                              std::span<const double> gt_flags, const SoftLossOptions& opt = {}) {
  const Vector s(scores.begin(), scores.end());
  const std::size_t quota[] = {k};
  return loss_e2e(std::span<const Vector>(&s, 1), quota, gt_flags, opt);
}

/// Trainable fusion scales; alpha/beta/gamma = exp(log sigma).
struct FusionWeights {
  double log_sigma_e2e = 0.0;
  Vector log_sigma_single;

  static FusionWeights ones(std::size_t stages) { return {0.0, Vector(stages, 0.0)}; }
  std::size_t parameter_count() const { return 1 + log_sigma_single.size(); }
};

namespace detail {

inline void accumulate_stage_grads(LossOutput& into, const LossOutput& from, std::size_t first_stage,
                                   double scale) {
  for (std::size_t s = 0; s < from.grads_per_stage.size(); ++s) {
    Vector& dst = into.grads_per_stage.at(first_stage + s);
    const Vector& src = from.grads_per_stage[s];
    if (dst.empty()) dst.assign(src.size(), 0.0);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += scale * src[j];
  }
}

}  // namespace detail

/// Uncertainty-weighted fusion:
///   L_e2e / (2 alpha^2) + sum_i L_single_i / (2 sigma_i^2) + log2(alpha * prod sigma_i).
/// Single-stage loss i feeds stage i.
inline LossOutput loss_uwl(const LossOutput& e2e, std::span<const LossOutput> singles,
                           const FusionWeights& w) {
  if (singles.empty()) throw std::invalid_argument("loss_uwl: needs at least one single-stage loss");
  if (w.log_sigma_single.size() != singles.size()) {
    throw std::invalid_argument("loss_uwl: one fusion weight per single-stage loss");
  }
  const std::size_t stages = std::max(e2e.grads_per_stage.size(), singles.size());
  LossOutput out;
  out.grads_per_stage.assign(stages, Vector{});
  out.fusion_grads.assign(w.parameter_count(), 0.0);

  auto add_term = [&](const LossOutput& term, double log_sigma, std::size_t first_stage,
                      std::size_t slot) {
    const double inv = std::exp(-2.0 * log_sigma);  // 1 / sigma^2
    out.value += 0.5 * inv * term.value + log_sigma / std::numbers::ln2;
    out.fusion_grads[slot] = -inv * term.value + 1.0 / std::numbers::ln2;
    detail::accumulate_stage_grads(out, term, first_stage, 0.5 * inv);
  };
  add_term(e2e, w.log_sigma_e2e, 0, 0);
  for (std::size_t i = 0; i < singles.size(); ++i) add_term(singles[i], w.log_sigma_single[i], i, i + 1);
  return out;
}

/// Fixed-weight fusion: e2e_weight * L_e2e + single_weight * sum_i L_single_i.
inline LossOutput loss_fixed_fusion(const LossOutput& e2e, std::span<const LossOutput> singles,
                                    double e2e_weight, double single_weight) {
  const std::size_t stages = std::max(e2e.grads_per_stage.size(), singles.size());
  LossOutput out;
  out.grads_per_stage.assign(stages, Vector{});
  out.value = e2e_weight * e2e.value;
  detail::accumulate_stage_grads(out, e2e, 0, e2e_weight);
  for (std::size_t i = 0; i < singles.size(); ++i) {
    out.value += single_weight * singles[i].value;
    detail::accumulate_stage_grads(out, singles[i], i, single_weight);
  }
  return out;
}

/// Mean logistic loss treating ground-truth items as positives.
inline LossOutput loss_bce(std::span<const double> scores, std::span<const double> gt_flags) {
  const std::size_t n = scores.size();
  if (n == 0) throw std::invalid_argument("loss_bce: empty scores");
  require_finite(scores, "loss_bce");
  detail::check_flags(gt_flags, n, "loss_bce");
  LossOutput out;
  Vector grad(n);
  for (std::size_t j = 0; j < n; ++j) {
    out.value += softplus(scores[j]) - gt_flags[j] * scores[j];
    grad[j] = (sigmoid(scores[j]) - gt_flags[j]) / static_cast<double>(n);
  }
  out.value /= static_cast<double>(n);
  out.grads_per_stage.push_back(std::move(grad));
  return out;
}

/// Mean RankNet loss over ordered pairs with grades[i] > grades[j].
inline LossOutput loss_ranknet(std::span<const double> scores, std::span<const int> grades) {
  const std::size_t n = scores.size();
  if (grades.size() != n) throw std::invalid_argument("loss_ranknet: grade length mismatch");
  require_finite(scores, "loss_ranknet");
  LossOutput out;
  Vector grad(n, 0.0);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (grades[i] <= grades[j]) continue;
      const double diff = scores[i] - scores[j];
      out.value += softplus(-diff);
      const double g = -sigmoid(-diff);
      grad[i] += g;
      grad[j] -= g;
      ++pairs;
    }
  }
  if (pairs > 0) {
    out.value /= static_cast<double>(pairs);
    for (double& g : grad) g /= static_cast<double>(pairs);
  }
  out.grads_per_stage.push_back(std::move(grad));
  return out;
}

}  // namespace lcron

#endif  // LCRON_LOSSES_HPP_
