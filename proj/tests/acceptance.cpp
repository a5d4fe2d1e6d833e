// Acceptance suite: one PASS/FAIL line per criterion. Exit status is 0 only
// when every criterion passes.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lcron/cascade_eval.hpp"
#include "lcron/diffsort.hpp"
#include "lcron/harness.hpp"
#include "lcron/losses.hpp"
#include "lcron/sampling.hpp"
#include "oracles.hpp"

using namespace lcron;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("%s  criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

constexpr std::size_t kSizes[] = {2, 4, 8, 16};
constexpr double kTaus[] = {0.5, 1.0, 10.0};
constexpr SortOperator kOps[] = {SortOperator::kNeuralSort, SortOperator::kSoftSort};

Vector flags_with_positive(std::mt19937_64& rng, std::size_t n) {
  Vector y = testing::random_flags(rng, n, 1 + rng() % n);
  return y;
}

// True when some log argument of the survival cross-entropy is close to
// either clamp edge, where central differences lose accuracy.
bool near_clamp(const std::vector<Vector>& scores, const std::vector<std::size_t>& quotas, const Vector& y,
                const SoftLossOptions& opt) {
  Vector p(y.size(), 1.0);
  for (std::size_t s = 0; s < scores.size(); ++s) {
    const Vector q = topk_select_prob(soft_permutation(opt.op, scores[s], opt.temperature), quotas[s]).probs;
    for (std::size_t j = 0; j < p.size(); ++j) p[j] *= q[j];
  }
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double arg = y[j] == 1.0 ? p[j] : 1.0 - p[j];
    if (arg < 1e-3 || arg > 1.0 - 1e-3) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = Clock::now();
  constexpr int kInstances = 240;  // 4 sizes x 3 temperatures x 20
  constexpr double kStep = 1e-6;
  std::mt19937_64 rng(101);
  int redrawn = 0;
  std::vector<std::pair<std::string, double>> worst;
  auto track = [&](const std::string& name, double err) {
    for (auto& w : worst) {
      if (w.first == name) {
        w.second = std::max(w.second, err);
        return;
      }
    }
    worst.emplace_back(name, err);
  };

  for (int inst = 0; inst < kInstances; ++inst) {
    const std::size_t n = kSizes[inst % 4];
    const double tau = kTaus[(inst / 4) % 3];
    const SortOperator op = kOps[(inst / 12) % 2];
    const SoftLossOptions opt{tau, op};
    Vector y;
    std::vector<Vector> scores;
    std::vector<std::size_t> quotas;
    std::size_t k = 0;
    // The clamped log is not differentiable where its argument meets the
    // clamp; finite differences straddling it are meaningless. Saturated
    // instances are pulled toward ties, which moves every survival
    // probability to q/n, strictly inside the clamp because q < n.
    y = flags_with_positive(rng, n);
    scores = {testing::random_vector(rng, n), testing::random_vector(rng, n)};
    quotas = {1 + rng() % (n - 1), 1 + rng() % (n - 1)};
    k = 1 + rng() % (n - 1);
    while (near_clamp(scores, quotas, y, opt) || near_clamp({scores[0]}, {k}, y, opt) ||
           near_clamp({scores[1]}, {k}, y, opt)) {
      for (auto& v : scores)
        for (double& x : v) x *= 0.5;
      ++redrawn;
    }

    // Sorting pullbacks against a random upstream.
    for (SortOperator sop : kOps) {
      const Matrix up = testing::random_matrix(rng, n, n);
      const ScalarFn f = [&](const Vector& x) {
        const Matrix p = soft_permutation(sop, x, tau).matrix;
        double v = 0.0;
        for (std::size_t i = 0; i < n * n; ++i) v += p.data()[i] * up.data()[i];
        return v;
      };
      track(std::string("pullback ") + std::string(to_string(sop)),
            grad_check(f, pullback(sop, scores[0], tau, up), scores[0], kStep));
    }

    // L_e2e and L_single: normalizers are constants in the backward pass.
    {
      const LossOutput out = loss_e2e(scores, quotas, y, opt);
      const ScalarFn f = [&](const Vector& x) {
        return testing::frozen_e2e({Vector(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n)),
                                    Vector(x.begin() + static_cast<std::ptrdiff_t>(n), x.end())},
                                   quotas, y, opt, scores);
      };
      Vector point = scores[0], g = out.grads_per_stage[0];
      point.insert(point.end(), scores[1].begin(), scores[1].end());
      g.insert(g.end(), out.grads_per_stage[1].begin(), out.grads_per_stage[1].end());
      track("L_e2e", grad_check(f, g, point, kStep));
    }
    {
      const ScalarFn f = [&](const Vector& x) { return testing::frozen_e2e({x}, {k}, y, opt, {scores[0]}); };
      track("L_single", grad_check(f, loss_single(scores[0], k, y, opt).grads_per_stage[0], scores[0], kStep));
    }

    // UWL fusion over stage scores and the three log-scales.
    {
      const FusionWeights w{testing::random_vector(rng, 1, 0.3)[0], testing::random_vector(rng, 2, 0.3)};
      const LossOutput e2e = loss_e2e(scores, quotas, y, opt);
      const std::vector<LossOutput> singles = {loss_single(scores[0], k, y, opt),
                                               loss_single(scores[1], k, y, opt)};
      const LossOutput fused = loss_uwl(e2e, singles, w);
      Vector point = scores[0];
      point.insert(point.end(), scores[1].begin(), scores[1].end());
      point.push_back(w.log_sigma_e2e);
      point.insert(point.end(), w.log_sigma_single.begin(), w.log_sigma_single.end());
      Vector g = fused.grads_per_stage[0];
      g.insert(g.end(), fused.grads_per_stage[1].begin(), fused.grads_per_stage[1].end());
      g.insert(g.end(), fused.fusion_grads.begin(), fused.fusion_grads.end());
      const ScalarFn f = [&](const Vector& x) {
        const Vector s0(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n));
        const Vector s1(x.begin() + static_cast<std::ptrdiff_t>(n), x.begin() + static_cast<std::ptrdiff_t>(2 * n));
        const double a = x[2 * n], b0 = x[2 * n + 1], b1 = x[2 * n + 2];
        const double le = testing::frozen_e2e({s0, s1}, quotas, y, opt, scores);
        const double l0 = testing::frozen_e2e({s0}, {k}, y, opt, {scores[0]});
        const double l1 = testing::frozen_e2e({s1}, {k}, y, opt, {scores[1]});
        return 0.5 * std::exp(-2 * a) * le + 0.5 * std::exp(-2 * b0) * l0 + 0.5 * std::exp(-2 * b1) * l1 +
               (a + b0 + b1) / std::log(2.0);
      };
      track("UWL", grad_check(f, g, point, kStep));
    }

    // Pointwise and pairwise baselines.
    {
      const ScalarFn f = [&](const Vector& x) {
        double v = 0.0;
        for (std::size_t j = 0; j < n; ++j) v += std::log1p(std::exp(-std::abs(x[j]))) + std::max(x[j], 0.0) - y[j] * x[j];
        return v / static_cast<double>(n);
      };
      track("BCE", grad_check(f, loss_bce(scores[0], y).grads_per_stage[0], scores[0], kStep));
    }
    {
      std::vector<int> grades(n);
      for (int& g : grades) g = static_cast<int>(rng() % 3);
      const ScalarFn f = [&](const Vector& x) {
        double v = 0.0;
        int pairs = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            if (grades[i] > grades[j]) {
              v += std::log1p(std::exp(-(x[i] - x[j])));
              ++pairs;
            }
        return pairs ? v / pairs : 0.0;
      };
      track("RankNet", grad_check(f, loss_ranknet(scores[0], grades).grads_per_stage[0], scores[0], kStep));
    }
  }

  double max_err = 0.0;
  std::ostringstream detail;
  for (const auto& [name, err] : worst) {
    max_err = std::max(max_err, err);
    detail << name << " " << fmt("%.1e", err) << ", ";
  }
  const double secs = seconds_since(t0);
  detail << kInstances << " instances each, " << redrawn << " shrink steps away from the log clamp, " << fmt("%.1f s", secs);
  report(1, max_err <= 1e-4 && secs < 120.0, "gradient fidelity <= 1e-4", detail.str());
}

// ---------------------------------------------------------------------------

void operator_properties() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  double worst_row = 0.0, worst_equiv = 0.0;
  int argmax_misses = 0;
  for (SortOperator op : kOps) {
    for (int c = 0; c < 1000; ++c) {
      const std::size_t n = 2 + rng() % 31;
      const double tau = std::exp(std::uniform_real_distribution<double>(std::log(0.05), std::log(100.0))(rng));
      const Vector s = testing::random_vector(rng, n);
      const Matrix p = soft_permutation(op, s, tau).matrix;
      for (std::size_t i = 0; i < n; ++i) worst_row = std::max(worst_row, std::abs(sum(p.row(i)) - 1.0));

      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      Vector ps(n);
      for (std::size_t j = 0; j < n; ++j) ps[j] = s[perm[j]];
      const Matrix pp = soft_permutation(op, ps, tau).matrix;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) worst_equiv = std::max(worst_equiv, std::abs(pp(i, j) - p(i, perm[j])));

      // Distinct scores on a grid so the smallest gap is known.
      Vector d(n);
      for (std::size_t j = 0; j < n; ++j) d[j] = static_cast<double>(j) * 0.1;
      std::shuffle(d.begin(), d.end(), rng);
      const Matrix h = soft_permutation(op, d, 1e-4).matrix;
      const auto order = hard_sort_desc(d).order;
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = h.row(i);
        const std::size_t arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (arg != order[i]) ++argmax_misses;
      }
    }
  }
  const double secs = seconds_since(t0);
  report(2, worst_row <= 1e-9 && argmax_misses == 0 && worst_equiv <= 1e-12 && secs < 60.0,
         "operator properties, 1000 cases per operator",
         "row-sum error " + fmt("%.1e", worst_row) + ", argmax misses " + std::to_string(argmax_misses) +
             ", equivariance error " + fmt("%.1e", worst_equiv) + ", " + fmt("%.1f s", secs));
}

// ---------------------------------------------------------------------------

void bound_verification() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  int lower_violations = 0, gap_violations = 0;
  double worst_lower = 0.0, worst_gap = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 3 + rng() % 8;
    const std::size_t q1 = 2 + rng() % (n - 2), q2 = 1 + rng() % (q1 - 1);
    const double tau = kTaus[rng() % 3];
    const SortOperator op = kOps[trial % 2];
    const Vector p1 = topk_select_prob(soft_permutation(op, testing::random_vector(rng, n), tau), q1).probs;
    const Vector p2 = topk_select_prob(soft_permutation(op, testing::random_vector(rng, n), tau), q2).probs;
    const GapReport r = bound_gap(p1, p2, q1, q2);
    bool low = false, gap = false;
    for (std::size_t i = 0; i < n; ++i) {
      worst_lower = std::min(worst_lower, r.exact_survival[i] - r.product_bound[i]);
      worst_gap = std::max(worst_gap, r.delta[i] - r.delta_prime[i]);
      low |= r.exact_survival[i] < r.product_bound[i] - 1e-9;
      gap |= r.delta[i] > r.delta_prime[i] + 1e-9;
    }
    lower_violations += low;
    gap_violations += gap;
  }

  int mc_disagreements = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t n = 4 + inst % 4, q1 = 2 + inst % 2, q2 = 1;
    const Vector p1 = topk_select_prob(neural_sort(testing::random_vector(rng, n), 1.0), q1).probs;
    const Vector p2 = topk_select_prob(soft_sort(testing::random_vector(rng, n), 1.0), q2).probs;
    const Vector exact = exact_survival(p1, p2, q1, q2);
    const testing::MonteCarloResult mc = testing::monte_carlo_survival(p1, p2, q1, 1000000, 900 + inst);
    for (std::size_t i = 0; i < n; ++i) {
      // An entry never hit in the draws has a zero sample error; the
      // estimate cannot resolve anything finer than one draw.
      const double se = std::max(mc.stderr_[i], 1.0 / 1e6);
      if (std::abs(mc.mean[i] - exact[i]) > 3.0 * se) ++mc_disagreements;
    }
  }
  const double secs = seconds_since(t0);
  report(3, lower_violations == 0 && gap_violations == 0 && mc_disagreements == 0 && secs < 300.0,
         "survival lower bound and gap bound on 500 instances, Monte-Carlo cross-check",
         "lower-bound violations " + std::to_string(lower_violations) + "/500 (worst " + fmt("%.3g", worst_lower) +
             "), gap-bound violations " + std::to_string(gap_violations) + "/500 (worst " + fmt("%.3g", worst_gap) +
             "), Monte-Carlo 3-sigma disagreements " + std::to_string(mc_disagreements) + ", " +
             fmt("%.1f s", secs));
}

// ---------------------------------------------------------------------------

void normalization() {
  std::mt19937_64 rng(404);
  double worst_mass = 0.0;
  int monotonic_violations = 0, cases = 0;
  for (SortOperator op : kOps) {
    for (double tau : {1e-3, 0.5, 1.0, 10.0}) {
      for (std::size_t n : kSizes) {
        for (int rep = 0; rep < 25; ++rep) {
          const SoftPermutation p = soft_permutation(op, testing::random_vector(rng, n), tau);
          Vector prev(n, 0.0);
          for (std::size_t q = 1; q <= n; ++q) {
            const Vector probs = topk_select_prob(p, q).probs;
            worst_mass = std::max(worst_mass, std::abs(sum(probs) - static_cast<double>(q)));
            for (std::size_t j = 0; j < n; ++j) monotonic_violations += probs[j] < prev[j] - 1e-15;
            prev = probs;
            ++cases;
          }
        }
      }
    }
  }
  report(4, worst_mass <= 1e-6 && monotonic_violations == 0, "top-q mass equals q, monotone in q",
         "max |sum - q| " + fmt("%.3g", worst_mass) + " over " + std::to_string(cases) +
             " cases, monotonicity violations " + std::to_string(monotonic_violations));
}

// ---------------------------------------------------------------------------

void label_law() {
  SynthConfig cfg;
  cfg.n_days = 5;
  cfg.impressions_per_day = 2000;
  const Dataset ds = generate_dataset(cfg);
  const StageTag gt_stage = static_cast<StageTag>(ds.stage_names.size() - 1);
  std::size_t pairs = 0, bad = 0;
  for (const auto& s : ds.samples) {
    for (const auto& a : s.items) {
      bad += (a.gt == 1) != (a.stage == gt_stage);
      for (const auto& b : s.items) {
        if (&a == &b) continue;
        const bool by_grade = a.grade > b.grade;
        const bool by_law = a.stage > b.stage || (a.stage == b.stage && a.rank > b.rank);
        bad += by_grade != by_law;
        ++pairs;
      }
    }
  }
  report(5, bad == 0 && ds.samples.size() == 10000, "graded labels follow stage order then within-stage rank",
         std::to_string(ds.samples.size()) + " impressions, " + std::to_string(pairs) + " ordered pairs, " +
             std::to_string(bad) + " violations");
}

// ---------------------------------------------------------------------------
// Synthetic benchmark shared by criteria 6-9.

ExperimentConfig benchmark_config() {
  ExperimentConfig cfg;  // 20 days x 2000 impressions, N = 20, K = 5
  cfg.temperature = 50.0;
  return cfg;
}

constexpr std::size_t kSeeds = 5;

std::string mean_std(const Vector& x) { return fmt("%.4f", mean_of(x)) + " +- " + fmt("%.4f", stddev_of(x)); }

void directional(const Dataset& ds, std::string* lcron_metrics) {
  const auto t0 = Clock::now();
  const ExperimentConfig cfg = benchmark_config();
  const std::vector<Method> methods = {Method::kLcron, Method::kE2eOnly, Method::kSingleOnly, Method::kBce,
                                       Method::kRankNet};
  const auto rows = sweep(cfg, ds, methods, {cfg.temperature}, kSeeds);
  std::ostringstream csv;
  write_metrics_csv(csv, {rows[0].runs[0]});
  *lcron_metrics = csv.str();
  const Vector& lc = rows[0].joint;
  const double m = mean_of(lc);
  const bool ordered = m >= mean_of(rows[1].joint) && m >= mean_of(rows[2].joint) && m > mean_of(rows[3].joint) &&
                       m > mean_of(rows[4].joint);
  const TTestResult t = welch_t_test(lc, rows[3].joint);
  std::ostringstream detail;
  for (const auto& r : rows) detail << to_string(r.method) << " " << mean_std(r.joint) << ", ";
  detail << "lcron vs bce p = " << fmt("%.3g", t.p_two_sided) << ", " << fmt("%.0f s", seconds_since(t0));
  report(6, ordered && t.t > 0.0 && t.p_two_sided < 0.05 && seconds_since(t0) < 1800.0,
         "last-day joint recall: lcron >= e2e_only, single_only; > bce (significant), ranknet", detail.str());
}

void tightening(const Dataset& ds) {
  Vector lc_before, lc_after, e2e_after;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    ExperimentConfig cfg = benchmark_config();
    cfg.seed = 1 + s;
    const DiagnosticsReport l = diagnostics_run(cfg, ds);
    cfg.method = Method::kE2eOnly;
    const DiagnosticsReport e = diagnostics_run(cfg, ds);
    lc_before.push_back(l.before.mean_delta_prime);
    lc_after.push_back(l.after.mean_delta_prime);
    e2e_after.push_back(e.after.mean_delta_prime);
  }
  const bool pass = mean_of(lc_after) < mean_of(lc_before) && mean_of(lc_after) <= mean_of(e2e_after);
  report(7, pass, "mean delta' shrinks with training and lcron <= e2e_only",
         "lcron before " + mean_std(lc_before) + ", after " + mean_std(lc_after) + ", e2e_only after " +
             mean_std(e2e_after));
}

void perfect_data() {
  ExperimentConfig cfg = benchmark_config();
  // No noise and a pure dot-product utility, which both model kinds can represent.
  cfg.synth.noise_scales.assign(cfg.synth.noise_scales.size(), 0.0);
  cfg.synth.interaction_weight = 0.0;
  const Dataset ds = generate_dataset(cfg.synth);
  std::ostringstream detail;
  bool pass = true;
  for (Method m : all_methods()) {
    double best = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      ExperimentConfig c = cfg;
      c.method = m;
      c.seed = seed;
      best = std::max(best, run_experiment(c, ds).days.back().joint_recall);
    }
    pass &= best == 1.0;
    detail << to_string(m) << " " << fmt("%.4f", best) << ", ";
  }
  detail << "best of 3 seeds";
  report(8, pass, "noiseless data: every method reaches joint recall 1.0", detail.str());
}

void determinism(const Dataset& ds, const std::string& first) {
  const RunReport again = run_experiment(benchmark_config(), ds);
  std::ostringstream csv;
  write_metrics_csv(csv, {again});
  report(9, csv.str() == first, "rerun gives byte-identical metrics",
         std::to_string(first.size()) + " bytes compared");
}

}  // namespace

// With arguments, runs only the listed criteria: `acceptance 1 4`.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto want = [&](int id) { return only.empty() || std::count(only.begin(), only.end(), id) > 0; };
  if (want(1)) gradient_fidelity();
  if (want(2)) operator_properties();
  if (want(3)) bound_verification();
  if (want(4)) normalization();
  if (want(5)) label_law();
  if (want(6) || want(7) || want(9)) {
    const Dataset ds = generate_dataset(benchmark_config().synth);
    std::string lcron_metrics;
    if (want(6) || want(9)) directional(ds, &lcron_metrics);
    if (want(7)) tightening(ds);
    if (want(9)) determinism(ds, lcron_metrics);
  }
  if (want(8)) perfect_data();
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
