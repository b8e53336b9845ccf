#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/csv.hpp"
#include "miccd/error.hpp"
#include "miccd/graph.hpp"
#include "miccd/rng.hpp"

namespace miccd {

/// Hard interventions: node index -> clamped value.
using Interventions = std::map<NodeIndex, double>;

enum class GraphStructure { chain, random };
enum class Strength { weak, medium, strong };
enum class Nonlinearity { identity, tanh };

NLOHMANN_JSON_SERIALIZE_ENUM(GraphStructure, {{GraphStructure::chain, "chain"},
                                              {GraphStructure::random, "random"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Strength, {{Strength::weak, "weak"},
                                        {Strength::medium, "medium"},
                                        {Strength::strong, "strong"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Nonlinearity, {{Nonlinearity::identity, "identity"},
                                            {Nonlinearity::tanh, "tanh"}})

struct NoiseParams {
  double mean = 0.0;
  double sd = 1.0;
};

/// Per-node noise regimes. Index = node index (target included).
struct NoiseSpec {
  std::vector<NoiseParams> normal;
  std::vector<NoiseParams> anomalous;
};

/// X_j = sum_k w_k * phi(X_{pa_k}) + Z_j, phi = identity or tanh.
struct Mechanism {
  NodeIndex node = 0;
  NodeSet parents;
  std::vector<double> weights;
  Nonlinearity nonlinearity = Nonlinearity::identity;

  template <class Values>
  double evaluate(const Values& values) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < parents.size(); ++k) {
      double v = values[parents[k]];
      acc += weights[k] * (nonlinearity == Nonlinearity::tanh ? std::tanh(v) : v);
    }
    return acc;
  }
};

struct AnomalyPattern {
  int id = 0;
  NodeIndex node = 0;
  NoiseParams anomalous;
};

/// Ground-truth structural causal model with additive noise.
struct Scm {
  CausalGraph graph;
  std::vector<Mechanism> mechanisms;  // one per node, indexed by node
  NoiseSpec noise;
  std::optional<double> threshold;

  double threshold_value() const {
    if (!threshold) throw ThresholdUnset("anomaly threshold has not been computed");
    return *threshold;
  }

  /// Ancestral evaluation from a full noise vector, with optional clamps.
  Eigen::VectorXd propagate(std::span<const double> z, const Interventions& clamp = {}) const {
    if (z.size() != graph.node_count())
      throw LengthMismatch("noise vector has length " + std::to_string(z.size()) + ", expected " +
                           std::to_string(graph.node_count()));
    Eigen::VectorXd v(graph.node_count());
    for (NodeIndex j : graph.topological_order()) {
      if (auto it = clamp.find(j); it != clamp.end())
        v[j] = it->second;
      else
        v[j] = mechanisms[j].evaluate(v) + z[j];
    }
    return v;
  }
};

inline NoiseParams default_anomaly(NoiseParams normal, double shift = 3.0, double scale = 2.0) {
  return {normal.mean + shift * normal.sd, scale * normal.sd};
}

/// chain: X_1 -> ... -> X_n -> Y. random: forward pairs of a random
/// topological permutation kept with probability `sparsity`; Y (node n) is
/// last in the permutation and always gets at least one parent.
inline CausalGraph generate_random_graph(std::size_t n, GraphStructure structure, double sparsity,
                                         std::uint64_t seed) {
  if (n < 1) throw IndexOutOfRange("generate_random_graph needs n >= 1");
  const NodeIndex target = n;
  if (structure == GraphStructure::chain) {
    std::vector<Edge> edges;
    for (NodeIndex i = 0; i < n; ++i) edges.emplace_back(i, i + 1);
    return CausalGraph::build(n + 1, std::move(edges), target);
  }
  if (!(sparsity > 0.0 && sparsity < 1.0)) throw IndexOutOfRange("sparsity must lie in (0,1)");
  Rng rng(derive_seed(seed, 0x6772617068));
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<NodeIndex> perm(n);
    std::iota(perm.begin(), perm.end(), NodeIndex{0});
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    perm.push_back(target);
    std::vector<Edge> edges;
    for (std::size_t a = 0; a < perm.size(); ++a)
      for (std::size_t b = a + 1; b < perm.size(); ++b)
        if (rng.bernoulli(sparsity)) edges.emplace_back(perm[a], perm[b]);
    bool target_has_parent = std::any_of(edges.begin(), edges.end(),
                                         [&](const Edge& e) { return e.second == target; });
    if (!target_has_parent) edges.emplace_back(perm[rng.index(n)], target);
    auto g = CausalGraph::build(n + 1, std::move(edges), target);
    // Any parent of Y traces back to some root, so a root->Y path exists
    // once Y has a parent; the check stays for clarity of the contract.
    for (NodeIndex r = 0; r < n; ++r)
      if (g.parents(r).empty() && g.has_path(r, target)) return g;
  }
  throw GenerationFailed("no valid random graph after 100 draws");
}

inline std::pair<double, double> weight_range(Strength s) {
  switch (s) {
    case Strength::weak: return {0.1, 0.5};
    case Strength::medium: return {0.5, 1.0};
    case Strength::strong: return {1.0, 2.0};
  }
  return {0.5, 1.0};
}

/// Random weights with |w| in the strength range and random sign; normal
/// noise N(0,1) everywhere; anomalous regime mean + 3 sd, sd * 2.
inline Scm sample_mechanisms(const CausalGraph& g, Strength strength, Nonlinearity nl,
                             std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6d656368));
  auto [lo, hi] = weight_range(strength);
  Scm scm;
  scm.graph = g;
  for (NodeIndex j = 0; j < g.node_count(); ++j) {
    Mechanism m;
    m.node = j;
    m.parents = g.parents(j);
    m.nonlinearity = nl;
    for (std::size_t k = 0; k < m.parents.size(); ++k) {
      double mag = rng.uniform(lo, hi);
      m.weights.push_back(rng.bernoulli(0.5) ? mag : -mag);
    }
    scm.mechanisms.push_back(std::move(m));
    scm.noise.normal.push_back({0.0, 1.0});
    scm.noise.anomalous.push_back(default_anomaly({0.0, 1.0}));
  }
  return scm;
}

inline void set_anomaly_shift(Scm& scm, double shift, double scale) {
  for (std::size_t j = 0; j < scm.noise.normal.size(); ++j)
    scm.noise.anomalous[j] = default_anomaly(scm.noise.normal[j], shift, scale);
}

/// Linear-interpolated empirical quantile (type 7).
inline double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw EmptyInput("quantile of empty sample");
  std::sort(v.begin(), v.end());
  double h = q * static_cast<double>(v.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline Eigen::VectorXd draw_noise(const Scm& scm, Rng& rng, const AnomalyPattern* pattern = nullptr) {
  const std::size_t nodes = scm.graph.node_count();
  Eigen::VectorXd z(nodes);
  for (NodeIndex j = 0; j < nodes; ++j) {
    NoiseParams p = (pattern && pattern->node == j) ? pattern->anomalous : scm.noise.normal[j];
    z[j] = p.sd > 0 ? rng.normal(p.mean, p.sd) : p.mean;
  }
  return z;
}

/// Empirical q-quantile of Y over n normal-regime samples; stored in scm.
inline double compute_threshold(Scm& scm, double q = 0.95, std::size_t n = 10000,
                                 std::uint64_t seed = 0) {
  if (!(q > 0.0 && q < 1.0)) throw IndexOutOfRange("quantile level must lie in (0,1)");
  Rng rng(derive_seed(seed, 0x746872));
  std::vector<double> ys;
  ys.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd z = draw_noise(scm, rng);
    ys.push_back(scm.propagate(std::span<const double>(z.data(), z.size()))[scm.graph.target()]);
  }
  scm.threshold = empirical_quantile(std::move(ys), q);
  return *scm.threshold;
}

/// Picks `count` anomaly patterns on distinct random non-target variables
/// (cycling through variables again when count > d).
inline std::vector<AnomalyPattern> make_patterns(const Scm& scm, std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x706174));
  std::vector<NodeIndex> vars = scm.graph.variables();
  std::shuffle(vars.begin(), vars.end(), rng.engine());
  std::vector<AnomalyPattern> out;
  for (std::size_t p = 0; p < count; ++p) {
    NodeIndex node = vars[p % vars.size()];
    out.push_back({static_cast<int>(p), node, scm.noise.anomalous[node]});
  }
  return out;
}

/// Samples with their generating noises and labels. `values` holds full
/// node-order rows (target included); features()/target_values() give the
/// x / y split.
struct LabeledDataset {
  Eigen::MatrixXd values;  // n x node_count
  Eigen::MatrixXd noise;   // n x node_count
  std::vector<int> pattern_id;
  std::vector<int> root_cause;
  std::vector<int> y_abnormal;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }

  Eigen::MatrixXd features(const CausalGraph& g) const {
    Eigen::MatrixXd x(values.rows(), g.variable_count());
    for (std::size_t k = 0; k < g.variables().size(); ++k) x.col(k) = values.col(g.variables()[k]);
    return x;
  }
  Eigen::VectorXd target_values(const CausalGraph& g) const { return values.col(g.target()); }
};

/// Ancestral sampling: n_normal normal-regime rows followed by
/// n_per_pattern rows per pattern.
inline LabeledDataset simulate_dataset(const Scm& scm, const std::vector<AnomalyPattern>& patterns,
                                       std::size_t n_per_pattern, std::size_t n_normal,
                                       std::uint64_t seed) {
  const double t = scm.threshold_value();
  for (const auto& p : patterns)
    if (p.node == scm.graph.target())
      throw InterventionOnTarget("anomaly pattern may not perturb the target");
  const std::size_t nodes = scm.graph.node_count();
  const std::size_t n = n_normal + n_per_pattern * patterns.size();
  LabeledDataset ds;
  ds.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nodes));
  ds.noise.resizeLike(ds.values);
  std::size_t row = 0;
  auto emit_block = [&](std::size_t count, const AnomalyPattern* pattern, std::uint64_t stream) {
    Rng rng(derive_seed(seed, stream));
    for (std::size_t i = 0; i < count; ++i, ++row) {
      Eigen::VectorXd z = draw_noise(scm, rng, pattern);
      Eigen::VectorXd v = scm.propagate(std::span<const double>(z.data(), z.size()));
      ds.values.row(static_cast<Eigen::Index>(row)) = v.transpose();
      ds.noise.row(static_cast<Eigen::Index>(row)) = z.transpose();
      ds.pattern_id.push_back(pattern ? pattern->id : -1);
      ds.root_cause.push_back(pattern ? static_cast<int>(pattern->node) : -1);
      ds.y_abnormal.push_back(v[scm.graph.target()] > t ? 1 : 0);
    }
  };
  emit_block(n_normal, nullptr, 0);
  for (std::size_t p = 0; p < patterns.size(); ++p) emit_block(n_per_pattern, &patterns[p], p + 1);
  return ds;
}

/// Ground-truth counterfactual: reuse the realized noises, clamp the
/// intervened nodes, recompute everything in topological order.
inline Eigen::VectorXd oracle_counterfactual(const Scm& scm, std::span<const double> z_true,
                                             const Interventions& interventions) {
  for (const auto& [node, value] : interventions) {
    if (node == scm.graph.target()) throw InterventionOnTarget("cannot intervene on the target");
    if (node >= scm.graph.node_count()) throw IndexOutOfRange("intervention index out of range");
  }
  return scm.propagate(z_true, interventions);
}

// ---------------------------------------------------------------- json / csv

inline nlohmann::json scm_to_json(const Scm& scm) {
  nlohmann::json mechs = nlohmann::json::array();
  for (const auto& m : scm.mechanisms)
    mechs.push_back({{"node", m.node}, {"parents", m.parents}, {"weights", m.weights},
                     {"nonlinearity", m.nonlinearity}});
  auto regime = [](const std::vector<NoiseParams>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : v) a.push_back({p.mean, p.sd});
    return a;
  };
  nlohmann::json j{{"graph", graph_to_json(scm.graph)},
                   {"mechanisms", mechs},
                   {"noise", {{"normal", regime(scm.noise.normal)}, {"anomalous", regime(scm.noise.anomalous)}}}};
  j["threshold"] = scm.threshold ? nlohmann::json(*scm.threshold) : nlohmann::json(nullptr);
  return j;
}

inline Scm scm_from_json(const nlohmann::json& j) {
  try {
    Scm scm;
    scm.graph = graph_from_json(j.at("graph"));
    for (const auto& m : j.at("mechanisms")) {
      Mechanism mech;
      mech.node = m.at("node").get<NodeIndex>();
      mech.parents = m.at("parents").get<NodeSet>();
      mech.weights = m.at("weights").get<std::vector<double>>();
      mech.nonlinearity = m.at("nonlinearity").get<Nonlinearity>();
      if (mech.weights.size() != mech.parents.size()) throw FormatError("weight count != parent count");
      scm.mechanisms.push_back(std::move(mech));
    }
    auto regime = [](const nlohmann::json& a) {
      std::vector<NoiseParams> v;
      for (const auto& p : a) v.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      return v;
    };
    scm.noise.normal = regime(j.at("noise").at("normal"));
    scm.noise.anomalous = regime(j.at("noise").at("anomalous"));
    if (!j.at("threshold").is_null()) scm.threshold = j.at("threshold").get<double>();
    if (scm.mechanisms.size() != scm.graph.node_count()) throw FormatError("one mechanism per node required");
    return scm;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scm json: ") + e.what());
  }
}

inline nlohmann::json patterns_to_json(const std::vector<AnomalyPattern>& patterns) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& p : patterns)
    a.push_back({{"id", p.id}, {"node", p.node}, {"mean", p.anomalous.mean}, {"sd", p.anomalous.sd}});
  return a;
}

inline std::vector<AnomalyPattern> patterns_from_json(const nlohmann::json& a) {
  std::vector<AnomalyPattern> out;
  for (const auto& p : a)
    out.push_back({p.at("id").get<int>(), p.at("node").get<NodeIndex>(),
                   {p.at("mean").get<double>(), p.at("sd").get<double>()}});
  return out;
}

/// Dataset CSV (x_1..x_d,y,pattern_id,root_cause,y_abnormal) plus extra
/// integer columns appended on the right.
inline csv::Table dataset_table(const CausalGraph& g, const LabeledDataset& ds,
                                const std::vector<std::pair<std::string, std::vector<int>>>& extra = {}) {
  csv::Table t;
  for (std::size_t k = 1; k <= g.variable_count(); ++k) t.header.push_back("x_" + std::to_string(k));
  for (const char* h : {"y", "pattern_id", "root_cause", "y_abnormal"}) t.header.emplace_back(h);
  for (const auto& [name, col] : extra) t.header.push_back(name);
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    std::vector<std::string> r;
    const auto row = static_cast<Eigen::Index>(i);
    for (NodeIndex v : g.variables()) r.push_back(csv::format_double(ds.values(row, v)));
    r.push_back(csv::format_double(ds.values(row, g.target())));
    r.push_back(std::to_string(ds.pattern_id[i]));
    r.push_back(std::to_string(ds.root_cause[i]));
    r.push_back(std::to_string(ds.y_abnormal[i]));
    for (const auto& [name, col] : extra) r.push_back(std::to_string(col.at(i)));
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline csv::Table noise_table(const LabeledDataset& ds) {
  csv::Table t;
  for (Eigen::Index k = 1; k <= ds.noise.cols(); ++k) t.header.push_back("z_" + std::to_string(k));
  for (Eigen::Index i = 0; i < ds.noise.rows(); ++i) {
    std::vector<std::string> r;
    for (Eigen::Index k = 0; k < ds.noise.cols(); ++k) r.push_back(csv::format_double(ds.noise(i, k)));
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline void write_dataset(const std::string& data_path, const std::string& noise_path,
                          const CausalGraph& g, const LabeledDataset& ds) {
  csv::write(data_path, dataset_table(g, ds));
  csv::write(noise_path, noise_table(ds));
}

inline LabeledDataset read_dataset(const std::string& data_path, const std::string& noise_path,
                                   const CausalGraph& g) {
  const csv::Table data = csv::read(data_path);
  const csv::Table noise = csv::read(noise_path);
  if (data.rows.size() != noise.rows.size()) throw FormatError("dataset and noise row counts differ");
  if (noise.header.size() != g.node_count()) throw FormatError("noise csv width does not match graph");
  LabeledDataset ds;
  const auto n = static_cast<Eigen::Index>(data.rows.size());
  ds.values.resize(n, static_cast<Eigen::Index>(g.node_count()));
  ds.noise.resizeLike(ds.values);
  std::vector<std::size_t> cols;
  for (std::size_t k = 1; k <= g.variable_count(); ++k) cols.push_back(data.column("x_" + std::to_string(k)));
  const std::size_t cy = data.column("y"), cp = data.column("pattern_id"), cr = data.column("root_cause"),
                    ca = data.column("y_abnormal");
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = data.rows[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < cols.size(); ++k) ds.values(i, g.variables()[k]) = csv::parse_double(r[cols[k]]);
    ds.values(i, g.target()) = csv::parse_double(r[cy]);
    ds.pattern_id.push_back(static_cast<int>(csv::parse_int(r[cp])));
    ds.root_cause.push_back(static_cast<int>(csv::parse_int(r[cr])));
    ds.y_abnormal.push_back(static_cast<int>(csv::parse_int(r[ca])));
    const auto& zr = noise.rows[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < ds.noise.cols(); ++k) ds.noise(i, k) = csv::parse_double(zr[static_cast<std::size_t>(k)]);
  }
  return ds;
}

}  // namespace miccd
