#ifndef LCRON_HARNESS_HPP_
#define LCRON_HARNESS_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "lcron/cascade_eval.hpp"
#include "lcron/diffsort.hpp"
#include "lcron/losses.hpp"
#include "lcron/models.hpp"
#include "lcron/numerics.hpp"
#include "lcron/sampling.hpp"

namespace lcron {

enum class Method { kLcron, kLcronFixedWeights, kBce, kRankNet, kE2eOnly, kSingleOnly };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m = {Method::kLcron,  Method::kLcronFixedWeights, Method::kBce,
                                        Method::kRankNet, Method::kE2eOnly,          Method::kSingleOnly};
  return m;
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kLcron: return "lcron";
    case Method::kLcronFixedWeights: return "lcron_fixed_weights";
    case Method::kBce: return "bce";
    case Method::kRankNet: return "ranknet";
    case Method::kE2eOnly: return "e2e_only";
    case Method::kSingleOnly: return "single_only";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : all_methods()) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown method: " + s);
}

inline bool uses_soft_sort(Method m) { return m != Method::kBce && m != Method::kRankNet; }

enum class EvalMode { kLastDay, kStreaming };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  Method method = Method::kLcron;
  SortOperator op = SortOperator::kNeuralSort;
  double temperature = 1.0;
  std::vector<std::size_t> train_quotas;  // empty: K for every stage
  CascadeConfig cascade{{10, 7}, 5};

  SynthConfig synth;
  std::string dataset_path;  // overrides synth when set

  double lr = 0.01;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  double fixed_e2e_weight = 1.0;
  double fixed_single_weight = 1.0;

  std::uint64_t seed = 1;
  EvalMode mode = EvalMode::kLastDay;
  bool incremental = false;
  std::size_t diagnostic_impressions = 200;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::string output_dir;

  std::vector<std::size_t> resolved_train_quotas() const {
    if (!train_quotas.empty()) return train_quotas;
    return std::vector<std::size_t>(cascade.stages(), cascade.k);
  }

  void validate() const {
    try {
      cascade.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (dataset_path.empty()) {
      try {
        synth.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      if (synth.stages != cascade.stages()) {
        throw ConfigError("generator stages (" + std::to_string(synth.stages) + ") != serving stages (" +
                          std::to_string(cascade.stages()) + ")");
      }
      if (synth.per_stage_counts.back() != cascade.k) {
        throw ConfigError("k must equal the number of ground-truth items per impression (" +
                          std::to_string(synth.per_stage_counts.back()) + ")");
      }
      if (cascade.quotas.front() > synth.items_per_impression()) {
        throw ConfigError("first serving quota exceeds items per impression");
      }
    }
    const auto tq = resolved_train_quotas();
    if (tq.size() != cascade.stages()) throw ConfigError("need one training quota per stage");
    for (std::size_t q : tq) {
      if (q < 1) throw ConfigError("training quotas must be >= 1");
      if (dataset_path.empty() && q > synth.items_per_impression()) {
        throw ConfigError("training quota exceeds items per impression");
      }
    }
    if (uses_soft_sort(method) && !(temperature > 0.0)) throw ConfigError("tau must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (method == Method::kLcronFixedWeights && (fixed_e2e_weight < 0.0 || fixed_single_weight < 0.0)) {
      throw ConfigError("fixed fusion weights must be non-negative");
    }
  }
};

// ---------------------------------------------------------------------------
// Key-value configuration. Lines are "key = value"; '#' starts a comment.

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream in(v);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(parse_number<T>(key, trim(part)));
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "method", "operator", "tau", "train_quotas", "serving_quotas", "k", "dataset", "stages",
      "n_users", "n_items", "feature_dim", "pool_size", "pool_quotas", "pool_gt", "per_stage_counts",
      "noise", "interaction_weight", "n_days", "impressions_per_day", "collapse_stage_grades",
      "data_seed", "lr", "batch_size", "epochs", "fixed_e2e_weight", "fixed_single_weight", "seed",
      "mode", "incremental", "diagnostic_impressions", "threads", "output_dir"};
  return keys;
}

inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& raw) {
  using detail::parse_list;
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  try {
    if (key == "method") cfg.method = parse_method(v);
    else if (key == "operator") cfg.op = parse_sort_operator(v);
    else if (key == "tau") cfg.temperature = parse_number<double>(key, v);
    else if (key == "train_quotas") cfg.train_quotas = parse_list<std::size_t>(key, v);
    else if (key == "serving_quotas") cfg.cascade.quotas = parse_list<std::size_t>(key, v);
    else if (key == "k") cfg.cascade.k = parse_number<std::size_t>(key, v);
    else if (key == "dataset") cfg.dataset_path = v;
    else if (key == "stages") cfg.synth.stages = parse_number<std::size_t>(key, v);
    else if (key == "n_users") cfg.synth.n_users = parse_number<std::size_t>(key, v);
    else if (key == "n_items") cfg.synth.n_items = parse_number<std::size_t>(key, v);
    else if (key == "feature_dim") cfg.synth.feature_dim = parse_number<std::size_t>(key, v);
    else if (key == "pool_size") cfg.synth.pool_size = parse_number<std::size_t>(key, v);
    else if (key == "pool_quotas") cfg.synth.pool_quotas = parse_list<std::size_t>(key, v);
    else if (key == "pool_gt") cfg.synth.pool_gt = parse_number<std::size_t>(key, v);
    else if (key == "per_stage_counts") cfg.synth.per_stage_counts = parse_list<std::size_t>(key, v);
    else if (key == "noise") cfg.synth.noise_scales = parse_list<double>(key, v);
    else if (key == "interaction_weight") cfg.synth.interaction_weight = parse_number<double>(key, v);
    else if (key == "n_days") cfg.synth.n_days = parse_number<std::size_t>(key, v);
    else if (key == "impressions_per_day") cfg.synth.impressions_per_day = parse_number<std::size_t>(key, v);
    else if (key == "collapse_stage_grades") cfg.synth.collapse_stage_grades = detail::parse_bool(key, v);
    else if (key == "data_seed") cfg.synth.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "lr") cfg.lr = parse_number<double>(key, v);
    else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, v);
    else if (key == "epochs") cfg.epochs = parse_number<std::size_t>(key, v);
    else if (key == "fixed_e2e_weight") cfg.fixed_e2e_weight = parse_number<double>(key, v);
    else if (key == "fixed_single_weight") cfg.fixed_single_weight = parse_number<double>(key, v);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "mode") {
      if (v == "last_day") cfg.mode = EvalMode::kLastDay;
      else if (v == "streaming") cfg.mode = EvalMode::kStreaming;
      else throw ConfigError("mode must be last_day or streaming");
    }
    else if (key == "incremental") cfg.incremental = detail::parse_bool(key, v);
    else if (key == "diagnostic_impressions") cfg.diagnostic_impressions = parse_number<std::size_t>(key, v);
    else if (key == "threads") cfg.threads = parse_number<std::size_t>(key, v);
    else if (key == "output_dir") cfg.output_dir = v;
    else throw ConfigError("unknown config key: " + key);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline void load_config(std::istream& in, ExperimentConfig& cfg) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    apply_setting(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void load_config(const std::string& path, ExperimentConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  load_config(in, cfg);
}

/// Output directory: the config value, else $LCRON_OUTPUT_DIR, else "lcron_out".
inline std::string output_dir(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("LCRON_OUTPUT_DIR"); env && *env) return env;
  return "lcron_out";
}

inline Dataset load_or_generate(const ExperimentConfig& cfg) {
  return cfg.dataset_path.empty() ? generate_dataset(cfg.synth) : read_dataset(cfg.dataset_path);
}

// ---------------------------------------------------------------------------
// Training.

/// Stage 0 is a two-tower retriever; later stages are cross-feature MLPs.
inline std::vector<ModelSpec> stage_specs(std::size_t stages, std::size_t feature_dim) {
  std::vector<ModelSpec> specs;
  for (std::size_t s = 0; s < stages; ++s) {
    specs.push_back(s == 0 ? ModelSpec::two_tower(feature_dim) : ModelSpec::mlp(feature_dim));
  }
  return specs;
}

struct TrainState {
  std::vector<Model> models;
  std::vector<AdamState> optimizers;
  FusionWeights fusion;
  AdamState fusion_optimizer;
  std::vector<double> loss_curve;  // mean loss per optimizer step
};

inline TrainState init_state(const ExperimentConfig& cfg, std::size_t feature_dim) {
  TrainState st;
  const auto specs = stage_specs(cfg.cascade.stages(), feature_dim);
  for (std::size_t s = 0; s < specs.size(); ++s) {
    st.models.push_back(init_params(detail::splitmix64(cfg.seed * 1000003ULL + s), specs[s]));
    AdamState opt;
    opt.lr = cfg.lr;
    st.optimizers.push_back(opt);
  }
  st.fusion = FusionWeights::ones(specs.size());
  st.fusion_optimizer.lr = cfg.lr;
  return st;
}

namespace detail {

inline std::vector<Vector> item_features(const ImpressionSample& s) {
  std::vector<Vector> out;
  out.reserve(s.items.size());
  for (const auto& it : s.items) out.push_back(it.features);
  return out;
}

inline LossOutput sum_stage_losses(std::vector<LossOutput> parts) {
  LossOutput out;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    out.value += parts[s].value;
    out.grads_per_stage.push_back(std::move(parts[s].grads_per_stage[0]));
  }
  return out;
}

}  // namespace detail

/// Loss of one impression under the configured method. Fusion gradients are
/// filled only for methods with trainable fusion weights.
inline LossOutput method_loss(const ExperimentConfig& cfg, const std::vector<Vector>& scores,
                              const ImpressionSample& sample, const FusionWeights& fusion) {
  const Vector y = sample.gt_flags();
  const SoftLossOptions opt{cfg.temperature, cfg.op};
  const auto tq = cfg.resolved_train_quotas();
  auto singles = [&] {
    std::vector<LossOutput> out;
    for (const Vector& s : scores) out.push_back(loss_single(s, cfg.cascade.k, y, opt));
    return out;
  };
  switch (cfg.method) {
    case Method::kLcron:
      return loss_uwl(loss_e2e(scores, tq, y, opt), singles(), fusion);
    case Method::kLcronFixedWeights:
      return loss_fixed_fusion(loss_e2e(scores, tq, y, opt), singles(), cfg.fixed_e2e_weight,
                               cfg.fixed_single_weight);
    case Method::kE2eOnly:
      return loss_e2e(scores, tq, y, opt);
    case Method::kSingleOnly:
      return detail::sum_stage_losses(singles());
    case Method::kBce: {
      std::vector<LossOutput> parts;
      for (const Vector& s : scores) parts.push_back(loss_bce(s, y));
      return detail::sum_stage_losses(std::move(parts));
    }
    case Method::kRankNet: {
      const std::vector<int> g = sample.grades();
      std::vector<LossOutput> parts;
      for (const Vector& s : scores) parts.push_back(loss_ranknet(s, g));
      return detail::sum_stage_losses(std::move(parts));
    }
  }
  throw std::logic_error("method_loss: unhandled method");
}

/// One pass over `data` in a seed-determined order, one Adam step per batch.
inline void train_epoch(const ExperimentConfig& cfg, TrainState& st, std::vector<const ImpressionSample*> data,
                        std::uint64_t epoch_seed) {
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(data.begin(), data.end(), rng);
  const std::size_t stages = st.models.size();
  const bool train_fusion = cfg.method == Method::kLcron;

  for (std::size_t begin = 0; begin < data.size(); begin += cfg.batch_size) {
    const std::size_t end = std::min(data.size(), begin + cfg.batch_size);
    std::vector<Model> grads;
    for (const Model& m : st.models) grads.push_back(m.zeros_like());
    Vector fusion_grad(st.fusion.parameter_count(), 0.0);
    double batch_loss = 0.0;

    for (std::size_t b = begin; b < end; ++b) {
      const ImpressionSample& sample = *data[b];
      const std::vector<Vector> items = detail::item_features(sample);
      std::vector<Vector> scores(stages);
      std::vector<ScoreTrace> traces(stages);
      for (std::size_t s = 0; s < stages; ++s) scores[s] = score(st.models[s], sample.user_features, items, &traces[s]);
      const LossOutput out = method_loss(cfg, scores, sample, st.fusion);
      batch_loss += out.value;
      for (std::size_t s = 0; s < stages; ++s) {
        if (out.grads_per_stage[s].empty()) continue;
        backprop_scores(st.models[s], traces[s], out.grads_per_stage[s], grads[s]);
      }
      for (std::size_t i = 0; i < out.fusion_grads.size(); ++i) fusion_grad[i] += out.fusion_grads[i];
    }

    const double inv = 1.0 / static_cast<double>(end - begin);
    for (std::size_t s = 0; s < stages; ++s) {
      Vector g = grads[s].flatten();
      for (double& x : g) x *= inv;
      Vector p = st.models[s].flatten();
      adam_step(p, g, st.optimizers[s]);
      st.models[s].assign_flat(p);
    }
    if (train_fusion) {
      Vector p = {st.fusion.log_sigma_e2e};
      p.insert(p.end(), st.fusion.log_sigma_single.begin(), st.fusion.log_sigma_single.end());
      for (double& x : fusion_grad) x *= inv;
      adam_step(p, fusion_grad, st.fusion_optimizer);
      st.fusion.log_sigma_e2e = p[0];
      std::copy(p.begin() + 1, p.end(), st.fusion.log_sigma_single.begin());
    }
    st.loss_curve.push_back(batch_loss * inv);
  }
}

inline void train(const ExperimentConfig& cfg, TrainState& st, const std::vector<const ImpressionSample*>& data,
                  std::uint64_t salt = 0) {
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    train_epoch(cfg, st, data, detail::splitmix64(cfg.seed ^ detail::splitmix64(salt * 131 + e + 1)));
  }
}

// ---------------------------------------------------------------------------
// Evaluation.

struct DayMetrics {
  int day = 0;
  std::size_t impressions = 0;
  double joint_recall = 0.0;  // Recall@K@q_T through the hard funnel
  Vector stage_recall;        // Recall@K@q_T of each stage alone on the full list
  Vector stage_ndcg;          // NDCG@K of each stage, ground truth as binary relevance
};

namespace detail {

inline std::size_t worker_count(const ExperimentConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Fixed chunking keeps floating-point sums independent of the thread count.
inline constexpr std::size_t kEvalChunks = 16;

}  // namespace detail

inline DayMetrics evaluate(const ExperimentConfig& cfg, const std::vector<Model>& models,
                           const std::vector<const ImpressionSample*>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: no impressions");
  const std::size_t stages = models.size();
  struct Partial {
    double joint = 0.0;
    Vector recall, ndcg;
  };
  auto run_chunk = [&](std::size_t c) {
    Partial p{0.0, Vector(stages, 0.0), Vector(stages, 0.0)};
    const std::size_t lo = data.size() * c / detail::kEvalChunks;
    const std::size_t hi = data.size() * (c + 1) / detail::kEvalChunks;
    for (std::size_t i = lo; i < hi; ++i) {
      const ImpressionSample& sample = *data[i];
      const std::vector<Vector> items = detail::item_features(sample);
      std::vector<Vector> scores;
      for (const Model& m : models) scores.push_back(score(m, sample.user_features, items));
      const auto gt = sample.gt_indices();
      std::vector<int> relevance(items.size(), 0);
      for (std::size_t g : gt) relevance[g] = 1;
      p.joint += recall_at(cascade_filter(scores, cfg.cascade), gt);
      const std::size_t m = cfg.cascade.quotas.back();
      for (std::size_t s = 0; s < stages; ++s) {
        const auto order = hard_sort_desc(scores[s]).order;
        p.recall[s] += recall_at(std::span(order).first(m), gt);
        p.ndcg[s] += ndcg_at(scores[s], relevance, std::min(cfg.cascade.k, items.size()));
      }
    }
    return p;
  };

  std::vector<Partial> parts(detail::kEvalChunks);
  const std::size_t workers = std::min(detail::worker_count(cfg), detail::kEvalChunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < parts.size(); ++c) parts[c] = run_chunk(c);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t c = w; c < parts.size(); c += workers) parts[c] = run_chunk(c);
      }));
    }
    for (auto& j : jobs) j.get();
  }

  DayMetrics out;
  out.day = data.front()->day;
  out.impressions = data.size();
  out.stage_recall.assign(stages, 0.0);
  out.stage_ndcg.assign(stages, 0.0);
  for (const Partial& p : parts) {
    out.joint_recall += p.joint;
    for (std::size_t s = 0; s < stages; ++s) {
      out.stage_recall[s] += p.recall[s];
      out.stage_ndcg[s] += p.ndcg[s];
    }
  }
  const double n = static_cast<double>(data.size());
  out.joint_recall /= n;
  for (std::size_t s = 0; s < stages; ++s) {
    out.stage_recall[s] /= n;
    out.stage_ndcg[s] /= n;
  }
  return out;
}

struct RunReport {
  Method method = Method::kLcron;
  SortOperator op = SortOperator::kNeuralSort;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::vector<DayMetrics> days;
  std::vector<double> loss_curve;
  FusionWeights fusion;
  std::vector<Model> models;
  double wall_seconds = 0.0;  // never written to the metrics file
};

namespace detail {

inline RunReport new_report(const ExperimentConfig& cfg) {
  RunReport r;
  r.method = cfg.method;
  r.op = cfg.op;
  r.temperature = cfg.temperature;
  r.seed = cfg.seed;
  return r;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void check_stages(const ExperimentConfig& cfg, const Dataset& ds) {
  if (ds.stage_names.size() != cfg.cascade.stages() + 2) {
    throw ConfigError("dataset has " + std::to_string(ds.stage_names.size()) + " stage tags; expected " +
                      std::to_string(cfg.cascade.stages() + 2));
  }
}

}  // namespace detail

/// Trains on every day but the last, evaluates on the last.
inline RunReport run_experiment(const ExperimentConfig& cfg, const Dataset& ds) {
  cfg.validate();
  detail::check_stages(cfg, ds);
  const int days = ds.day_count();
  if (days < 2) throw std::invalid_argument("run_experiment: need at least two days");
  const auto t0 = std::chrono::steady_clock::now();
  TrainState st = init_state(cfg, ds.feature_dim);
  train(cfg, st, ds.days(0, days - 1));
  RunReport r = detail::new_report(cfg);
  r.days.push_back(evaluate(cfg, st.models, ds.days(days - 1, days)));
  r.loss_curve = std::move(st.loss_curve);
  r.fusion = st.fusion;
  r.models = std::move(st.models);
  r.wall_seconds = detail::seconds_since(t0);
  return r;
}

/// Day t (t >= 1) is evaluated after training on days 0..t-1: from scratch by
/// default, or continuing the previous day's models on day t-1 when
/// `incremental` is set.
inline RunReport streaming_eval(const ExperimentConfig& cfg, const Dataset& ds) {
  cfg.validate();
  detail::check_stages(cfg, ds);
  const int days = ds.day_count();
  if (days < 2) throw std::invalid_argument("streaming_eval: need at least two days");
  const auto t0 = std::chrono::steady_clock::now();
  RunReport r = detail::new_report(cfg);
  TrainState st = init_state(cfg, ds.feature_dim);
  for (int t = 1; t < days; ++t) {
    if (cfg.incremental) {
      train(cfg, st, ds.days(t - 1, t), static_cast<std::uint64_t>(t));
    } else {
      st = init_state(cfg, ds.feature_dim);
      train(cfg, st, ds.days(0, t), static_cast<std::uint64_t>(t));
    }
    r.days.push_back(evaluate(cfg, st.models, ds.days(t, t + 1)));
  }
  r.loss_curve = std::move(st.loss_curve);
  r.fusion = st.fusion;
  r.models = std::move(st.models);
  r.wall_seconds = detail::seconds_since(t0);
  return r;
}

inline RunReport run(const ExperimentConfig& cfg, const Dataset& ds) {
  return cfg.mode == EvalMode::kStreaming ? streaming_eval(cfg, ds) : run_experiment(cfg, ds);
}

// ---------------------------------------------------------------------------
// Bound-gap diagnostics on the first two stages.

struct GapSummary {
  std::size_t impressions = 0;
  double mean_delta_prime = 0.0;
  double max_delta_prime = 0.0;
  std::size_t enumerated = 0;  // impressions small enough for exact enumeration
  double mean_delta = 0.0;
  double max_delta = 0.0;
};

inline GapSummary gap_summary(const ExperimentConfig& cfg, const std::vector<Model>& models,
                              const std::vector<const ImpressionSample*>& data) {
  if (models.size() < 2) throw std::invalid_argument("gap_summary: needs at least two stages");
  const auto tq = cfg.resolved_train_quotas();
  GapSummary g;
  double dp_sum = 0.0, d_sum = 0.0;
  std::size_t dp_count = 0, d_count = 0;
  g.max_delta_prime = -INFINITY;
  g.max_delta = -INFINITY;
  for (const ImpressionSample* sample : data) {
    const std::vector<Vector> items = detail::item_features(*sample);
    const Vector s1 = score(models[0], sample->user_features, items);
    const Vector s2 = score(models[1], sample->user_features, items);
    const Vector p1 = topk_select_prob(soft_permutation(cfg.op, s1, cfg.temperature), tq[0]).probs;
    const Vector p2 = topk_select_prob(soft_permutation(cfg.op, s2, cfg.temperature), tq[1]).probs;
    for (double x : delta_prime(p1, p2, tq[1])) {
      dp_sum += x;
      g.max_delta_prime = std::max(g.max_delta_prime, x);
      ++dp_count;
    }
    if (items.size() <= kMaxEnumerationItems && tq[1] <= tq[0]) {
      const GapReport rep = bound_gap(p1, p2, tq[0], tq[1]);
      for (double x : rep.delta) {
        d_sum += x;
        g.max_delta = std::max(g.max_delta, x);
        ++d_count;
      }
      ++g.enumerated;
    }
    ++g.impressions;
  }
  g.mean_delta_prime = dp_count ? dp_sum / static_cast<double>(dp_count) : 0.0;
  if (d_count) {
    g.mean_delta = d_sum / static_cast<double>(d_count);
  } else {
    g.max_delta = 0.0;
  }
  return g;
}

struct DiagnosticsReport {
  GapSummary before;
  GapSummary after;
};

/// Gap statistics on the first impressions of the held-out day, at
/// initialization and after training on the remaining days.
inline DiagnosticsReport diagnostics_run(const ExperimentConfig& cfg, const Dataset& ds) {
  cfg.validate();
  detail::check_stages(cfg, ds);
  const int days = ds.day_count();
  if (days < 2) throw std::invalid_argument("diagnostics_run: need at least two days");
  auto probe = ds.days(days - 1, days);
  if (probe.size() > cfg.diagnostic_impressions) probe.resize(cfg.diagnostic_impressions);
  TrainState st = init_state(cfg, ds.feature_dim);
  DiagnosticsReport r;
  r.before = gap_summary(cfg, st.models, probe);
  train(cfg, st, ds.days(0, days - 1));
  r.after = gap_summary(cfg, st.models, probe);
  return r;
}

// ---------------------------------------------------------------------------
// Multi-seed sweeps.

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
};

/// Welch's unequal-variance two-sample t-test.
inline TTestResult welch_t_test(const Vector& a, const Vector& b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("welch_t_test: need two samples per group");
  auto moments = [](const Vector& x) {
    const double m = sum(x) / static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair(m, ss / static_cast<double>(x.size() - 1));
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  TTestResult r;
  if (se2 == 0.0) {
    r.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    r.df = na + nb - 2.0;
    r.p_two_sided = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

inline double mean_of(const Vector& x) { return sum(x) / static_cast<double>(x.size()); }

inline double stddev_of(const Vector& x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

struct SweepRow {
  Method method = Method::kLcron;
  double temperature = 1.0;
  std::vector<RunReport> runs;  // one per seed
  Vector joint;                 // last-day joint recall per seed
};

/// Runs every (method, tau) pair over `seeds` consecutive seeds starting at
/// cfg.seed. Methods without soft sorting run once at the first tau.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, const Dataset& ds, const std::vector<Method>& methods,
                                   const Vector& taus, std::size_t seeds) {
  if (seeds < 1) throw ConfigError("sweep: need at least one seed");
  if (taus.empty()) throw ConfigError("sweep: need at least one tau");
  std::vector<ExperimentConfig> cfgs;
  std::vector<SweepRow> rows;
  for (Method m : methods) {
    for (std::size_t t = 0; t < taus.size(); ++t) {
      if (!uses_soft_sort(m) && t > 0) break;
      SweepRow row;
      row.method = m;
      row.temperature = taus[t];
      rows.push_back(row);
      for (std::size_t s = 0; s < seeds; ++s) {
        ExperimentConfig c = base;
        c.method = m;
        c.temperature = taus[t];
        c.seed = base.seed + s;
        c.mode = EvalMode::kLastDay;
        c.threads = 1;
        c.validate();
        cfgs.push_back(c);
      }
    }
  }
  std::vector<RunReport> reports(cfgs.size());
  const std::size_t workers = std::min(detail::worker_count(base), cfgs.size());
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < cfgs.size(); i += workers) reports[i] = run_experiment(cfgs[i], ds);
    }));
  }
  for (auto& j : jobs) j.get();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t s = 0; s < seeds; ++s) {
      rows[r].runs.push_back(std::move(reports[r * seeds + s]));
      rows[r].joint.push_back(rows[r].runs.back().days.back().joint_recall);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Output. Metrics files hold no timing so reruns are byte-identical.

namespace detail {

inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt_fixed(double x, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  const std::size_t stages = reports.empty() || reports[0].days.empty() ? 0 : reports[0].days[0].stage_recall.size();
  out << "method,operator,tau,seed,day,impressions,joint_recall";
  for (std::size_t s = 0; s < stages; ++s) out << ",recall_stage" << s;
  for (std::size_t s = 0; s < stages; ++s) out << ",ndcg_stage" << s;
  out << "\n";
  for (const RunReport& r : reports) {
    for (const DayMetrics& d : r.days) {
      out << to_string(r.method) << ',' << to_string(r.op) << ',' << detail::fmt_double(r.temperature) << ','
          << r.seed << ',' << d.day << ',' << d.impressions << ',' << detail::fmt_double(d.joint_recall);
      for (double x : d.stage_recall) out << ',' << detail::fmt_double(x);
      for (double x : d.stage_ndcg) out << ',' << detail::fmt_double(x);
      out << "\n";
    }
  }
}

inline void write_loss_curve_csv(std::ostream& out, const RunReport& r) {
  out << "step,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) out << i << ',' << detail::fmt_double(r.loss_curve[i]) << "\n";
}

inline void write_sweep_summary(std::ostream& out, const std::vector<SweepRow>& rows) {
  const SweepRow* reference = nullptr;
  for (const auto& row : rows) {
    if (row.method == Method::kLcron && (!reference || mean_of(row.joint) > mean_of(reference->joint))) {
      reference = &row;
    }
  }
  out << "method               tau        joint_recall (mean +- std)   p vs best lcron\n";
  for (const auto& row : rows) {
    char line[160];
    std::string p = "-";
    if (reference && &row != reference && row.joint.size() >= 2) {
      p = detail::fmt_fixed(welch_t_test(reference->joint, row.joint).p_two_sided, 4);
    }
    std::snprintf(line, sizeof line, "%-20s %-10s %.4f +- %.4f              %s\n", to_string(row.method).c_str(),
                  uses_soft_sort(row.method) ? detail::fmt_double(row.temperature).c_str() : "-",
                  mean_of(row.joint), stddev_of(row.joint), p.c_str());
    out << line;
  }
}

inline void write_day_summary(std::ostream& out, const RunReport& r) {
  out << "method " << to_string(r.method) << "  operator " << to_string(r.op) << "  tau "
      << detail::fmt_double(r.temperature) << "  seed " << r.seed << "\n";
  out << "day   joint";
  const std::size_t stages = r.days.empty() ? 0 : r.days[0].stage_recall.size();
  for (std::size_t s = 0; s < stages; ++s) out << "   recall" << s << "  ndcg" << s;
  out << "\n";
  for (const DayMetrics& d : r.days) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%-5d %.4f", d.day, d.joint_recall);
    out << buf;
    for (std::size_t s = 0; s < stages; ++s) {
      std::snprintf(buf, sizeof buf, "   %.4f  %.4f", d.stage_recall[s], d.stage_ndcg[s]);
      out << buf;
    }
    out << "\n";
  }
}

inline void write_run_outputs(const std::string& dir, const std::vector<RunReport>& reports) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/metrics.csv");
    write_metrics_csv(out, reports);
  }
  {
    std::ofstream out(dir + "/summary.txt");
    for (const auto& r : reports) write_day_summary(out, r);
  }
  if (reports.size() == 1) {
    std::ofstream out(dir + "/loss_curve.csv");
    write_loss_curve_csv(out, reports[0]);
  }
  std::ofstream timing(dir + "/timing.txt");
  for (const auto& r : reports) {
    timing << to_string(r.method) << " seed " << r.seed << " " << detail::fmt_fixed(r.wall_seconds, 3) << " s\n";
  }
}

}  // namespace lcron

#endif  // LCRON_HARNESS_HPP_
