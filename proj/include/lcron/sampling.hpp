#ifndef LCRON_SAMPLING_HPP_
#define LCRON_SAMPLING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcron/numerics.hpp"

namespace lcron {

/// Funnel level an item died in. Level 0 is the earliest negative, level
/// stages + 1 is the ground truth (always maximal).
using StageTag = int;

/// Names for the T + 2 funnel levels of a T-stage cascade.
inline std::vector<std::string> stage_names(std::size_t stages) {
  if (stages == 2) return {"retrieval_neg", "prerank_neg", "rank_neg", "gt_pos"};
  if (stages == 3) return {"retrieval_neg", "prerank_neg", "coarse_neg", "rank_neg", "gt_pos"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i <= stages; ++i) names.push_back("stage" + std::to_string(i) + "_neg");
  names.push_back("gt_pos");
  return names;
}

struct ItemRecord {
  std::int64_t id = 0;
  Vector features;
  StageTag stage = 0;
  int rank = 1;   // within-stage rank, higher is better
  int grade = 1;  // dense 1..N, higher is better
  int gt = 0;

  bool operator==(const ItemRecord&) const = default;
};

struct ImpressionSample {
  int day = 0;
  Vector user_features;
  std::vector<ItemRecord> items;

  bool operator==(const ImpressionSample&) const = default;

  std::size_t size() const { return items.size(); }
  Vector gt_flags() const {
    Vector y(items.size());
    for (std::size_t j = 0; j < items.size(); ++j) y[j] = items[j].gt;
    return y;
  }
  std::vector<int> grades() const {
    std::vector<int> g(items.size());
    for (std::size_t j = 0; j < items.size(); ++j) g[j] = items[j].grade;
    return g;
  }
  std::vector<std::size_t> gt_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < items.size(); ++j) {
      if (items[j].gt) idx.push_back(j);
    }
    return idx;
  }
};

struct StageRank {
  StageTag stage = 0;
  int rank = 1;
};

/// Dense grades 1..N ordered lexicographically by (stage, within-stage rank).
inline std::vector<int> assign_labels(std::span<const StageRank> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) { return std::pair(items[i].stage, items[i].rank); };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (key(order[i]) == key(order[i - 1])) {
      throw std::invalid_argument("assign_labels: duplicate (stage, rank) pair");
    }
  }
  std::vector<int> grades(items.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) grades[order[pos]] = static_cast<int>(pos) + 1;
  return grades;
}

/// Coarse labels: every item of a stage shares one grade (stage + 1).
inline std::vector<int> assign_stage_grades(std::span<const StageRank> items) {
  std::vector<int> grades(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) grades[i] = items[i].stage + 1;
  return grades;
}

struct SynthConfig {
  std::size_t stages = 2;
  std::size_t n_users = 500;
  std::size_t n_items = 5000;
  std::size_t feature_dim = 16;
  // Reference funnel run over each candidate pool.
  std::size_t pool_size = 200;
  std::vector<std::size_t> pool_quotas = {60, 20};
  std::size_t pool_gt = 5;
  // Items sampled per funnel level (stages + 2 entries).
  std::vector<std::size_t> per_stage_counts = {5, 5, 5, 5};
  // Gaussian noise of each reference stage plus the final exposure decision (stages + 1 entries).
  std::vector<double> noise_scales = {0.5, 0.5, 0.5};
  double interaction_weight = 1.0;
  std::size_t n_days = 20;
  std::size_t impressions_per_day = 2000;
  bool collapse_stage_grades = false;
  std::uint64_t seed = 1;

  std::size_t items_per_impression() const {
    return std::accumulate(per_stage_counts.begin(), per_stage_counts.end(), std::size_t{0});
  }

  void validate() const {
    if (stages < 1) throw std::invalid_argument("SynthConfig: stages must be >= 1");
    if (feature_dim < 2) throw std::invalid_argument("SynthConfig: feature_dim must be >= 2");
    if (per_stage_counts.size() != stages + 2) {
      throw std::invalid_argument("SynthConfig: per_stage_counts needs stages + 2 entries");
    }
    if (noise_scales.size() != stages + 1) {
      throw std::invalid_argument("SynthConfig: noise_scales needs stages + 1 entries");
    }
    if (pool_quotas.size() != stages) {
      throw std::invalid_argument("SynthConfig: pool_quotas needs one entry per stage");
    }
    const std::size_t n = items_per_impression();
    if (n < 1 || n > 64) throw std::invalid_argument("SynthConfig: items per impression must be in [1, 64]");
    if (pool_size > n_items) throw std::invalid_argument("SynthConfig: pool larger than catalog");
    // Level sizes of the reference funnel must cover the requested counts.
    std::vector<std::size_t> sizes = {pool_size};
    sizes.insert(sizes.end(), pool_quotas.begin(), pool_quotas.end());
    sizes.push_back(pool_gt);
    for (std::size_t lvl = 0; lvl + 1 < sizes.size(); ++lvl) {
      if (sizes[lvl + 1] > sizes[lvl]) throw std::invalid_argument("SynthConfig: funnel must shrink");
    }
    for (std::size_t lvl = 0; lvl < stages + 1; ++lvl) {
      if (sizes[lvl] - sizes[lvl + 1] < per_stage_counts[lvl]) {
        throw std::invalid_argument("SynthConfig: pool too small for per-stage count of level " +
                                    std::to_string(lvl));
      }
    }
    if (pool_gt < per_stage_counts.back()) {
      throw std::invalid_argument("SynthConfig: pool_gt smaller than sampled ground-truth count");
    }
    if (n_users == 0 || n_days == 0 || impressions_per_day == 0) {
      throw std::invalid_argument("SynthConfig: counts must be positive");
    }
    for (double s : noise_scales) {
      if (!(s >= 0.0)) throw std::invalid_argument("SynthConfig: noise scales must be >= 0");
    }
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Vector gaussian_vector(std::mt19937_64& rng, std::size_t dim, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(dim);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace detail

/// Ground-truth utility of the synthetic world: a bilinear match plus a
/// non-bilinear interaction on the elementwise product.
inline double true_utility(std::span<const double> user, std::span<const double> item,
                           double interaction_weight) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(user.size()));
  double match = 0.0;
  double interaction = 0.0;
  for (std::size_t k = 0; k < user.size(); ++k) {
    const double prod = user[k] * item[k];
    match += prod;
    interaction += std::abs(prod) * (k % 2 == 0 ? 1.0 : -1.0);
  }
  return scale * (match + interaction_weight * interaction);
}

struct Dataset {
  std::size_t feature_dim = 0;
  std::vector<std::string> stage_names;
  std::vector<ImpressionSample> samples;

  bool operator==(const Dataset&) const = default;

  int day_count() const {
    int d = 0;
    for (const auto& s : samples) d = std::max(d, s.day + 1);
    return d;
  }

  /// Impressions whose day is in [first, last).
  std::vector<const ImpressionSample*> days(int first, int last) const {
    std::vector<const ImpressionSample*> out;
    for (const auto& s : samples) {
      if (s.day >= first && s.day < last) out.push_back(&s);
    }
    return out;
  }
};

/// Candidate pool of one impression and the level each pool item reached.
struct FunnelTrace {
  std::vector<std::size_t> pool;  // catalog indices
  Vector utility;                 // true utility per pool item
  std::vector<StageTag> level;    // funnel level per pool item
};

/// Builds one impression from its own derived seed.
inline ImpressionSample generate_impression(const SynthConfig& cfg, const std::vector<Vector>& users,
                                            const std::vector<Vector>& catalog, std::uint64_t index,
                                            FunnelTrace* trace = nullptr) {
  std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ detail::splitmix64(index + 1)));
  std::uniform_int_distribution<std::size_t> pick_user(0, users.size() - 1);
  const std::size_t user = pick_user(rng);

  // Candidate pool: distinct catalog items.
  std::vector<std::size_t> pool(catalog.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < cfg.pool_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(cfg.pool_size);

  Vector utility(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    utility[i] = true_utility(users[user], catalog[pool[i]], cfg.interaction_weight);
  }

  // Reference funnel: each level applies fresh noise to the true utility.
  const std::size_t levels = cfg.stages + 1;
  std::vector<std::size_t> alive(pool.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  std::vector<StageTag> died_at(pool.size(), static_cast<StageTag>(levels));
  Vector noisy_at_death(pool.size(), 0.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t lvl = 0; lvl < levels; ++lvl) {
    const std::size_t keep = lvl < cfg.stages ? cfg.pool_quotas[lvl] : cfg.pool_gt;
    Vector noisy(alive.size());
    for (std::size_t i = 0; i < alive.size(); ++i) {
      noisy[i] = utility[alive[i]] + cfg.noise_scales[lvl] * normal(rng);
    }
    std::vector<std::size_t> order(alive.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return noisy[a] > noisy[b]; });
    std::vector<std::size_t> next;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const std::size_t item = alive[order[r]];
      noisy_at_death[item] = noisy[order[r]];
      if (r < keep) {
        next.push_back(item);
      } else {
        died_at[item] = static_cast<StageTag>(lvl);
      }
    }
    alive = std::move(next);
  }
  if (trace) *trace = {pool, utility, died_at};

  ImpressionSample out;
  out.day = static_cast<int>(index / cfg.impressions_per_day);
  out.user_features = users[user];
  std::vector<StageRank> keys;
  for (std::size_t lvl = 0; lvl <= levels; ++lvl) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (died_at[i] == static_cast<StageTag>(lvl)) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(cfg.per_stage_counts[lvl]);
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return noisy_at_death[a] < noisy_at_death[b];
    });
    for (std::size_t r = 0; r < members.size(); ++r) {
      ItemRecord item;
      item.id = static_cast<std::int64_t>(pool[members[r]]);
      item.features = catalog[pool[members[r]]];
      item.stage = static_cast<StageTag>(lvl);
      item.rank = static_cast<int>(r) + 1;
      item.gt = lvl == levels ? 1 : 0;
      out.items.push_back(std::move(item));
      keys.push_back({static_cast<StageTag>(lvl), static_cast<int>(r) + 1});
    }
  }
  // Present items in a seed-dependent order so position carries no signal.
  std::vector<std::size_t> perm(out.items.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<ItemRecord> shuffled;
  std::vector<StageRank> shuffled_keys;
  for (std::size_t p : perm) {
    shuffled.push_back(std::move(out.items[p]));
    shuffled_keys.push_back(keys[p]);
  }
  out.items = std::move(shuffled);
  const std::vector<int> grades =
      cfg.collapse_stage_grades ? assign_stage_grades(shuffled_keys) : assign_labels(shuffled_keys);
  for (std::size_t j = 0; j < out.items.size(); ++j) out.items[j].grade = grades[j];
  return out;
}

/// Latent user and item vectors of the synthetic world.
struct SynthWorld {
  std::vector<Vector> users;
  std::vector<Vector> items;
};

inline SynthWorld make_world(const SynthConfig& cfg) {
  std::mt19937_64 rng(detail::splitmix64(cfg.seed));
  SynthWorld w;
  for (std::size_t u = 0; u < cfg.n_users; ++u) w.users.push_back(detail::gaussian_vector(rng, cfg.feature_dim, 1.0));
  for (std::size_t i = 0; i < cfg.n_items; ++i) w.items.push_back(detail::gaussian_vector(rng, cfg.feature_dim, 1.0));
  return w;
}

inline Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const SynthWorld world = make_world(cfg);
  Dataset ds;
  ds.feature_dim = cfg.feature_dim;
  ds.stage_names = stage_names(cfg.stages);
  const std::size_t total = cfg.n_days * cfg.impressions_per_day;
  ds.samples.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    ds.samples.push_back(generate_impression(cfg, world.users, world.items, i));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON dataset files.
//
// Line 1: {"schema_version": 1, "feature_dim": d, "stage_names": [...]}
// Then one impression per line:
//   {"day": t, "user_features": [...],
//    "items": [{"id", "features", "stage", "rank", "grade", "gt"}, ...]}
// Grades are dense with larger = better. Labels where smaller is better
// must be inverted before import.

inline constexpr int kDatasetSchemaVersion = 1;

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const ImpressionSample& s, const std::vector<std::string>& names) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : s.items) {
    items.push_back({{"id", it.id},
                     {"features", it.features},
                     {"stage", names.at(static_cast<std::size_t>(it.stage))},
                     {"rank", it.rank},
                     {"grade", it.grade},
                     {"gt", it.gt}});
  }
  return {{"day", s.day}, {"user_features", s.user_features}, {"items", std::move(items)}};
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  out << nlohmann::json{{"schema_version", kDatasetSchemaVersion},
                        {"feature_dim", ds.feature_dim},
                        {"stage_names", ds.stage_names}}
             .dump()
      << '\n';
  for (const auto& s : ds.samples) out << to_json(s, ds.stage_names).dump() << '\n';
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(out, ds);
}

namespace detail {

template <typename T>
T require_field(const nlohmann::json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field \"") + key + "\"");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line, std::string("bad field \"") + key + "\": " + e.what());
  }
}

}  // namespace detail

inline Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  std::map<std::string, StageTag> stage_index;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, e.what());
    }
    if (!have_header) {
      const int version = detail::require_field<int>(j, "schema_version", line);
      if (version != kDatasetSchemaVersion) {
        throw SchemaVersionError("dataset schema_version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kDatasetSchemaVersion) + ")");
      }
      ds.feature_dim = detail::require_field<std::size_t>(j, "feature_dim", line);
      ds.stage_names = detail::require_field<std::vector<std::string>>(j, "stage_names", line);
      for (std::size_t i = 0; i < ds.stage_names.size(); ++i) {
        stage_index[ds.stage_names[i]] = static_cast<StageTag>(i);
      }
      have_header = true;
      continue;
    }
    ImpressionSample s;
    s.day = detail::require_field<int>(j, "day", line);
    s.user_features = detail::require_field<Vector>(j, "user_features", line);
    const auto items = detail::require_field<nlohmann::json>(j, "items", line);
    if (!items.is_array()) throw ParseError(line, "\"items\" must be an array");
    for (const auto& ji : items) {
      ItemRecord it;
      it.id = detail::require_field<std::int64_t>(ji, "id", line);
      it.features = detail::require_field<Vector>(ji, "features", line);
      const auto stage = detail::require_field<std::string>(ji, "stage", line);
      const auto found = stage_index.find(stage);
      if (found == stage_index.end()) throw ParseError(line, "unknown stage \"" + stage + "\"");
      it.stage = found->second;
      it.rank = detail::require_field<int>(ji, "rank", line);
      it.grade = detail::require_field<int>(ji, "grade", line);
      it.gt = detail::require_field<int>(ji, "gt", line);
      if (it.features.size() != ds.feature_dim) throw ParseError(line, "feature length != feature_dim");
      s.items.push_back(std::move(it));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_dataset(in);
}

}  // namespace lcron

#endif  // LCRON_SAMPLING_HPP_
