#ifndef LCRON_MODELS_HPP_
#define LCRON_MODELS_HPP_

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcron/numerics.hpp"

namespace lcron {

/// y = W x + b, W stored as (out x in).
struct DenseLayer {
  Matrix weight;
  Vector bias;

  std::size_t in() const { return weight.cols(); }
  std::size_t out() const { return weight.rows(); }
  bool operator==(const DenseLayer&) const = default;
};

/// Fully connected network; ReLU after every layer except the last.
struct Mlp {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.front().in(); }
  std::size_t output_dim() const { return layers.back().out(); }
  bool operator==(const Mlp&) const = default;
};

/// Pre-activation outputs of each layer plus the input, kept for backward.
struct MlpTrace {
  Vector input;
  std::vector<Vector> pre;
};

inline Vector mlp_forward(const Mlp& net, std::span<const double> x, MlpTrace* trace = nullptr) {
  if (x.size() != net.input_dim()) throw std::invalid_argument("mlp_forward: input dimension mismatch");
  Vector act(x.begin(), x.end());
  if (trace) {
    trace->input = act;
    trace->pre.clear();
  }
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const DenseLayer& layer = net.layers[l];
    Vector z(layer.bias);
    for (std::size_t o = 0; o < layer.out(); ++o) z[o] += dot(layer.weight.row(o), act);
    if (trace) trace->pre.push_back(z);
    if (l + 1 < net.layers.size()) {
      for (double& v : z) v = v > 0.0 ? v : 0.0;
    }
    act = std::move(z);
  }
  return act;
}

/// Accumulates parameter gradients into `grads` and returns dL/dinput.
/// ReLU subgradient at 0 is 0.
inline Vector mlp_backward(const Mlp& net, const MlpTrace& trace, std::span<const double> d_out,
                           Mlp& grads) {
  Vector delta(d_out.begin(), d_out.end());
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const DenseLayer& layer = net.layers[l];
    if (l + 1 < net.layers.size()) {
      for (std::size_t o = 0; o < delta.size(); ++o) {
        if (!(trace.pre[l][o] > 0.0)) delta[o] = 0.0;
      }
    }
    Vector input_act;
    if (l == 0) {
      input_act = trace.input;
    } else {
      input_act = trace.pre[l - 1];
      for (double& v : input_act) v = v > 0.0 ? v : 0.0;
    }
    DenseLayer& g = grads.layers[l];
    Vector d_in(layer.in(), 0.0);
    for (std::size_t o = 0; o < layer.out(); ++o) {
      if (delta[o] == 0.0) continue;
      g.bias[o] += delta[o];
      auto grow = g.weight.row(o);
      auto wrow = layer.weight.row(o);
      for (std::size_t i = 0; i < layer.in(); ++i) {
        grow[i] += delta[o] * input_act[i];
        d_in[i] += delta[o] * wrow[i];
      }
    }
    delta = std::move(d_in);
  }
  return delta;
}

enum class ModelKind { kTwoTower, kMlp };

inline std::string to_string(ModelKind k) { return k == ModelKind::kTwoTower ? "two_tower" : "mlp"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "two_tower") return ModelKind::kTwoTower;
  if (s == "mlp") return ModelKind::kMlp;
  throw std::invalid_argument("unknown model kind: " + s);
}

/// Architecture of one stage's scorer.
///  - two_tower: user and item towers feature_dim -> hidden... -> embedding_dim,
///    score = <user_embedding, item_embedding>.
///  - mlp: [user, item, user*item] -> hidden... -> 1.
struct ModelSpec {
  ModelKind kind = ModelKind::kMlp;
  std::size_t feature_dim = 16;
  std::vector<std::size_t> hidden = {32};
  std::size_t embedding_dim = 16;

  static ModelSpec two_tower(std::size_t feature_dim = 16) { return {ModelKind::kTwoTower, feature_dim, {32}, 16}; }
  static ModelSpec mlp(std::size_t feature_dim = 16) { return {ModelKind::kMlp, feature_dim, {32}, 1}; }
};

struct Model {
  ModelKind kind = ModelKind::kMlp;
  std::vector<Mlp> nets;  // two_tower: {user, item}; mlp: {net}

  bool operator==(const Model&) const = default;

  /// Visits every parameter tensor with a stable name.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (std::size_t n = 0; n < nets.size(); ++n) {
      const std::string net_name = kind == ModelKind::kMlp ? "mlp" : (n == 0 ? "user_tower" : "item_tower");
      for (std::size_t l = 0; l < nets[n].layers.size(); ++l) {
        DenseLayer& layer = nets[n].layers[l];
        const std::string base = net_name + "/layer" + std::to_string(l);
        fn(base + "/weight", layer.weight.rows(), layer.weight.cols(), std::span<double>(layer.weight.data()));
        fn(base + "/bias", std::size_t{1}, layer.bias.size(), std::span<double>(layer.bias));
      }
    }
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<Model*>(this)->for_each_tensor(
        [&](const std::string& name, std::size_t r, std::size_t c, std::span<double> data) {
          fn(name, r, c, std::span<const double>(data));
        });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, std::size_t, std::size_t, std::span<const double> d) { n += d.size(); });
    return n;
  }

  Vector flatten() const {
    Vector out;
    for_each_tensor([&](const std::string&, std::size_t, std::size_t, std::span<const double> d) {
      out.insert(out.end(), d.begin(), d.end());
    });
    return out;
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw std::invalid_argument("assign_flat: size mismatch");
    std::size_t off = 0;
    for_each_tensor([&](const std::string&, std::size_t, std::size_t, std::span<double> d) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + d.size()), d.begin());
      off += d.size();
    });
  }

  /// Same shapes, all zeros.
  Model zeros_like() const {
    Model z = *this;
    z.for_each_tensor([](const std::string&, std::size_t, std::size_t, std::span<double> d) {
      std::fill(d.begin(), d.end(), 0.0);
    });
    return z;
  }

  std::size_t feature_dim() const {
    return kind == ModelKind::kTwoTower ? nets[0].input_dim() : nets[0].input_dim() / 3;
  }
};

namespace detail {

inline Mlp make_mlp(std::mt19937_64& rng, const std::vector<std::size_t>& dims) {
  Mlp net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t fan_in = dims[l];
    const bool hidden = l + 2 < dims.size();
    // He scaling ahead of ReLU, fan-in scaling on the output layer.
    const double stddev = std::sqrt((hidden ? 2.0 : 1.0) / static_cast<double>(fan_in));
    std::normal_distribution<double> normal(0.0, stddev);
    DenseLayer layer{Matrix(dims[l + 1], fan_in), Vector(dims[l + 1], 0.0)};
    for (double& w : layer.weight.data()) w = normal(rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace detail

inline Model init_params(std::uint64_t seed, const ModelSpec& spec) {
  if (spec.feature_dim == 0 || spec.embedding_dim == 0) throw std::invalid_argument("init_params: zero dimension");
  std::mt19937_64 rng(seed);
  Model m;
  m.kind = spec.kind;
  if (spec.kind == ModelKind::kTwoTower) {
    std::vector<std::size_t> dims = {spec.feature_dim};
    dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
    dims.push_back(spec.embedding_dim);
    m.nets.push_back(detail::make_mlp(rng, dims));
    m.nets.push_back(detail::make_mlp(rng, dims));
  } else {
    std::vector<std::size_t> dims = {3 * spec.feature_dim};
    dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
    dims.push_back(1);
    m.nets.push_back(detail::make_mlp(rng, dims));
  }
  return m;
}

/// Forward state for one impression, needed by backprop_scores.
struct ScoreTrace {
  MlpTrace user;                 // two_tower
  Vector user_embedding;         // two_tower
  std::vector<MlpTrace> items;   // per item: item tower (two_tower) or the mlp
  std::vector<Vector> item_embeddings;
};

namespace detail {

inline Vector mlp_input(std::span<const double> user, std::span<const double> item) {
  Vector x;
  x.reserve(3 * user.size());
  x.insert(x.end(), user.begin(), user.end());
  x.insert(x.end(), item.begin(), item.end());
  for (std::size_t k = 0; k < user.size(); ++k) x.push_back(user[k] * item[k]);
  return x;
}

}  // namespace detail

/// Scores every item for one user.
inline Vector score(const Model& model, std::span<const double> user_features,
                    std::span<const Vector> item_features, ScoreTrace* trace = nullptr) {
  const std::size_t d = model.feature_dim();
  if (user_features.size() != d) throw std::invalid_argument("score: user feature dimension mismatch");
  for (const auto& f : item_features) {
    if (f.size() != d) throw std::invalid_argument("score: item feature dimension mismatch");
  }
  Vector out(item_features.size());
  if (trace) {
    trace->items.assign(item_features.size(), {});
    trace->item_embeddings.assign(item_features.size(), {});
  }
  if (model.kind == ModelKind::kTwoTower) {
    const Vector u = mlp_forward(model.nets[0], user_features, trace ? &trace->user : nullptr);
    if (trace) trace->user_embedding = u;
    for (std::size_t j = 0; j < item_features.size(); ++j) {
      const Vector v = mlp_forward(model.nets[1], item_features[j], trace ? &trace->items[j] : nullptr);
      out[j] = dot(u, v);
      if (trace) trace->item_embeddings[j] = v;
    }
  } else {
    for (std::size_t j = 0; j < item_features.size(); ++j) {
      const Vector x = detail::mlp_input(user_features, item_features[j]);
      out[j] = mlp_forward(model.nets[0], x, trace ? &trace->items[j] : nullptr)[0];
    }
  }
  return out;
}

inline Vector score_two_tower(const Model& model, std::span<const double> user,
                              std::span<const Vector> items) {
  if (model.kind != ModelKind::kTwoTower) throw std::invalid_argument("score_two_tower: not a two-tower model");
  return score(model, user, items);
}

inline Vector score_mlp(const Model& model, std::span<const double> user, std::span<const Vector> items) {
  if (model.kind != ModelKind::kMlp) throw std::invalid_argument("score_mlp: not an mlp model");
  return score(model, user, items);
}

/// Chains dL/dscores through the traced forward pass, accumulating into `grads`.
inline void backprop_scores(const Model& model, const ScoreTrace& trace, std::span<const double> d_scores,
                            Model& grads) {
  if (d_scores.size() != trace.items.size()) throw std::invalid_argument("backprop_scores: upstream length mismatch");
  if (model.kind == ModelKind::kTwoTower) {
    Vector d_user(trace.user_embedding.size(), 0.0);
    for (std::size_t j = 0; j < d_scores.size(); ++j) {
      if (d_scores[j] == 0.0) continue;
      const Vector& v = trace.item_embeddings[j];
      Vector d_item(v.size());
      for (std::size_t k = 0; k < v.size(); ++k) {
        d_user[k] += d_scores[j] * v[k];
        d_item[k] = d_scores[j] * trace.user_embedding[k];
      }
      mlp_backward(model.nets[1], trace.items[j], d_item, grads.nets[1]);
    }
    mlp_backward(model.nets[0], trace.user, d_user, grads.nets[0]);
  } else {
    for (std::size_t j = 0; j < d_scores.size(); ++j) {
      if (d_scores[j] == 0.0) continue;
      const double d = d_scores[j];
      mlp_backward(model.nets[0], trace.items[j], std::span<const double>(&d, 1), grads.nets[0]);
    }
  }
}

inline Model backprop_scores(const Model& model, const ScoreTrace& trace, std::span<const double> d_scores) {
  Model grads = model.zeros_like();
  backprop_scores(model, trace, d_scores, grads);
  return grads;
}

/// Bias-corrected Adam over a flat parameter list.
struct AdamState {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  Vector m;
  Vector v;
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state shape mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double m_hat = st.m[i] / c1;
    const double v_hat = st.v[i] / c2;
    params[i] -= st.lr * m_hat / (std::sqrt(v_hat) + st.epsilon);
  }
}

inline void adam_step(Model& params, const Model& grads, AdamState& st) {
  Vector flat = params.flatten();
  adam_step(flat, grads.flatten(), st);
  params.assign_flat(flat);
}

// ---------------------------------------------------------------------------
// Text checkpoints: one tensor per line, "name rows cols v0 v1 ...", values
// printed with 17 significant digits. Joint checkpoints prefix each stage's
// tensors with "stage<i>/".

inline void write_tensors(std::ostream& out, const std::string& prefix, const Model& model) {
  out << prefix << "kind 1 1 " << (model.kind == ModelKind::kTwoTower ? 0 : 1) << '\n';
  model.for_each_tensor([&](const std::string& name, std::size_t r, std::size_t c, std::span<const double> d) {
    out << prefix << name << ' ' << r << ' ' << c;
    for (double x : d) out << ' ' << std::setprecision(17) << x;
    out << '\n';
  });
}

inline void save_checkpoint(const std::string& path, std::span<const Model> stages) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (std::size_t s = 0; s < stages.size(); ++s) write_tensors(out, "stage" + std::to_string(s) + "/", stages[s]);
}

struct TensorRecord {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector data;
};

using TensorMap = std::map<std::string, TensorRecord>;

inline TensorMap read_tensors(std::istream& in) {
  TensorMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    TensorRecord rec;
    if (!(ls >> name >> rec.rows >> rec.cols)) {
      throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": bad tensor header");
    }
    rec.data.resize(rec.rows * rec.cols);
    for (double& x : rec.data) {
      if (!(ls >> x)) throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": short tensor");
    }
    map[name] = std::move(rec);
  }
  return map;
}

/// Fills `model` (already shaped) from the tensors under `prefix`.
inline void load_into(const TensorMap& map, const std::string& prefix, Model& model) {
  model.for_each_tensor([&](const std::string& name, std::size_t r, std::size_t c, std::span<double> d) {
    const auto it = map.find(prefix + name);
    if (it == map.end()) throw std::runtime_error("checkpoint missing tensor " + prefix + name);
    if (it->second.rows != r || it->second.cols != c) {
      throw std::runtime_error("checkpoint shape mismatch for " + prefix + name);
    }
    std::copy(it->second.data.begin(), it->second.data.end(), d.begin());
  });
}

inline std::vector<Model> load_checkpoint(const std::string& path, std::span<const ModelSpec> specs) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  const TensorMap map = read_tensors(in);
  std::vector<Model> out;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    Model m = init_params(0, specs[s]);
    load_into(map, "stage" + std::to_string(s) + "/", m);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace lcron

#endif  // LCRON_MODELS_HPP_
