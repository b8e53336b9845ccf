#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/config.hpp"
#include "miccd/decision.hpp"
#include "miccd/error.hpp"
#include "miccd/flat_surrogate.hpp"
#include "miccd/gmm.hpp"
#include "miccd/metrics.hpp"
#include "miccd/scm.hpp"
#include "miccd/surrogate.hpp"

namespace miccd {

/// Everything simulated for one (dataset, seed) cell.
struct CellData {
  Scm scm;
  std::vector<AnomalyPattern> patterns;
  LabeledDataset train;
  LabeledDataset test;
};

inline CellData generate_cell(const DatasetSpec& spec, const AnomalySpec& a, std::uint64_t seed) {
  CellData c;
  const CausalGraph g = generate_random_graph(spec.n, spec.structure, spec.sparsity, seed);
  c.scm = sample_mechanisms(g, spec.strength, spec.nonlinearity, seed);
  set_anomaly_shift(c.scm, a.shift, a.scale);
  compute_threshold(c.scm, a.threshold_quantile, a.threshold_samples, seed);
  c.patterns = make_patterns(c.scm, a.patterns, seed);
  c.train = simulate_dataset(c.scm, c.patterns, a.samples_per_pattern, a.normal_samples, derive_seed(seed, 0x7472));
  c.test = simulate_dataset(c.scm, c.patterns, a.test_per_pattern, a.test_normal, derive_seed(seed, 0x7465));
  return c;
}

/// Rows of `ds` whose pattern id is non-negative (anomalous regime).
inline std::vector<std::size_t> anomalous_rows(const LabeledDataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (ds.pattern_id[i] >= 0) out.push_back(i);
  return out;
}

/// At most `count` evenly spaced entries of `rows`, in order.
inline std::vector<std::size_t> spread(const std::vector<std::size_t>& rows, std::size_t count) {
  if (rows.size() <= count) return rows;
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(rows[k * rows.size() / count]);
  return out;
}

/// Per-column mean and population sd over the normal-regime rows.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> normal_stats(const LabeledDataset& ds) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (ds.pattern_id[i] < 0) idx.push_back(static_cast<Eigen::Index>(i));
  if (idx.empty()) throw EmptyInput("no normal-regime rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size()), ds.values.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = ds.values.row(idx[k]);
  return detail::column_stats(m);
}

// ------------------------------------------------------------ clustering

struct ClusterOutcome {
  GmmModel gmm;
  std::size_t K = 0;
  Eigen::VectorXd mean, sd;  // standardization of [x, y]
  std::vector<int> train_labels, test_labels;  // K marks normal rows
  double train_accuracy = 0.0, test_accuracy = 0.0;
};

/// Labels abnormal rows with a GMM over standardized [x, y]; normal rows
/// get the reserved label K.
inline std::vector<int> label_rows(const GmmModel& gmm, const Eigen::VectorXd& mean, const Eigen::VectorXd& sd,
                                   const LabeledDataset& ds) {
  const auto K = static_cast<int>(gmm.k());
  std::vector<int> labels(ds.rows(), K);
  const auto rows = anomalous_rows(ds);
  if (rows.empty()) return labels;
  Eigen::MatrixXd data(static_cast<Eigen::Index>(rows.size()), ds.values.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    data.row(static_cast<Eigen::Index>(k)) =
        ((ds.values.row(static_cast<Eigen::Index>(rows[k])) - mean.transpose()).array() / sd.transpose().array())
            .matrix();
  const PatternLabels pl = assign_labels(gmm, data);
  for (std::size_t k = 0; k < rows.size(); ++k) labels[rows[k]] = pl.hard[k];
  return labels;
}

inline double cluster_accuracy(const std::vector<int>& labels, const LabeledDataset& ds) {
  std::vector<int> pred, truth;
  for (std::size_t i : anomalous_rows(ds)) {
    pred.push_back(labels[i]);
    truth.push_back(ds.pattern_id[i]);
  }
  return pred.empty() ? 0.0 : aligned_accuracy(pred, truth);
}

inline ClusterOutcome cluster_cell(const CellData& cell, const ClusterSpec& spec, std::size_t patterns,
                                   std::uint64_t seed) {
  const auto rows = anomalous_rows(cell.train);
  if (rows.empty()) throw EmptyInput("no anomalous training rows to cluster");
  Eigen::MatrixXd raw(static_cast<Eigen::Index>(rows.size()), cell.train.values.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    raw.row(static_cast<Eigen::Index>(k)) = cell.train.values.row(static_cast<Eigen::Index>(rows[k]));
  ClusterOutcome out;
  std::tie(out.mean, out.sd) = detail::column_stats(raw);
  const Eigen::MatrixXd data =
      ((raw.rowwise() - out.mean.transpose()).array().rowwise() / out.sd.transpose().array()).matrix();
  const GmmOptions opts{spec.tol, spec.max_iter, spec.restarts};
  const std::uint64_t s = derive_seed(seed, 0x676d6d);
  out.K = spec.automatic ? select_k(data, spec.k_min, spec.k_max, s, opts) : (spec.k ? spec.k : patterns);
  out.gmm = fit_gmm(data, out.K, s, opts);
  out.train_labels = label_rows(out.gmm, out.mean, out.sd, cell.train);
  out.test_labels = label_rows(out.gmm, out.mean, out.sd, cell.test);
  out.train_accuracy = cluster_accuracy(out.train_labels, cell.train);
  out.test_accuracy = cluster_accuracy(out.test_labels, cell.test);
  return out;
}

// ------------------------------------------------------------- training

/// Label matrix fed to a variant: one-hot over K+1 labels, or a constant
/// single column when labels are ablated.
inline Eigen::MatrixXd variant_labels(const std::vector<int>& labels, std::size_t K, Variant v) {
  if (v == Variant::no_u) return Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(labels.size()), 1);
  return one_hot(labels, K + 1);
}

inline std::vector<double> variant_label(int label, std::size_t K, Variant v) {
  if (v == Variant::no_u) return {1.0};
  std::vector<double> u(K + 1, 0.0);
  u.at(static_cast<std::size_t>(label)) = 1.0;
  return u;
}

// -------------------------------------------------------------- fidelity

struct Fidelity {
  double cf_rmse = 0.0;
  double recon_rmse = 0.0;
};

/// Counterfactual and reconstruction r-MSE against the simulator.
///
/// Counterfactual: anomalous test rows, every single-variable intervention
/// at the normal mean and mean +/- one sd; errors pooled per descendant
/// node, r-MSE per node, averaged over nodes. Reconstruction: per-node
/// r-MSE of the reconstructed sample, averaged over nodes.
template <class CfFn, class ReconFn>
Fidelity evaluate_fidelity(const CellData& cell, const std::vector<int>& test_labels, std::size_t K, Variant v,
                           const EvalSpec& spec, CfFn&& cf, ReconFn&& recon) {
  const CausalGraph& g = cell.scm.graph;
  const auto N = static_cast<Eigen::Index>(g.node_count());
  const auto [mean, sd] = normal_stats(cell.train);
  Fidelity f;

  std::vector<std::vector<double>> pred(g.node_count()), truth(g.node_count());
  for (std::size_t i : spread(anomalous_rows(cell.test), spec.cf_rows)) {
    const Eigen::VectorXd x = cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const Eigen::VectorXd z = cell.test.noise.row(static_cast<Eigen::Index>(i)).transpose();
    const std::vector<double> u = variant_label(test_labels[i], K, v);
    for (NodeIndex node : g.variables()) {
      const NodeSet desc = g.descendants(node);
      if (desc.size() <= 1) continue;
      for (double step : {-1.0, 0.0, 1.0}) {
        const Interventions iv{{node, mean[static_cast<Eigen::Index>(node)] + step * sd[static_cast<Eigen::Index>(node)]}};
        const Eigen::VectorXd p = cf(std::span<const double>(x.data(), x.size()), std::span<const double>(u), iv);
        const Eigen::VectorXd t = oracle_counterfactual(cell.scm, std::span<const double>(z.data(), z.size()), iv);
        for (NodeIndex j : desc) {
          if (j == node) continue;
          pred[j].push_back(p[static_cast<Eigen::Index>(j)]);
          truth[j].push_back(t[static_cast<Eigen::Index>(j)]);
        }
      }
    }
  }
  double acc = 0.0;
  int used = 0;
  for (NodeIndex j = 0; j < g.node_count(); ++j) {
    if (truth[j].empty()) continue;
    acc += r_mse(pred[j], truth[j]);
    ++used;
  }
  f.cf_rmse = used ? acc / used : 0.0;

  std::vector<std::size_t> all(cell.test.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::vector<double>> rp(g.node_count()), rt(g.node_count());
  for (std::size_t i : spread(all, spec.recon_rows)) {
    const Eigen::VectorXd x = cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const std::vector<double> u = variant_label(test_labels[i], K, v);
    const Eigen::VectorXd r = recon(std::span<const double>(x.data(), x.size()), std::span<const double>(u));
    for (Eigen::Index j = 0; j < N; ++j) {
      rp[static_cast<std::size_t>(j)].push_back(r[j]);
      rt[static_cast<std::size_t>(j)].push_back(x[j]);
    }
  }
  acc = 0.0;
  for (std::size_t j = 0; j < rp.size(); ++j) acc += r_mse(rp[j], rt[j]);
  f.recon_rmse = acc / static_cast<double>(rp.size());
  return f;
}

inline Fidelity evaluate_fidelity(const SurrogateModel& m, const CellData& cell, const std::vector<int>& labels,
                                  std::size_t K, Variant v, const EvalSpec& spec) {
  return evaluate_fidelity(
      cell, labels, K, v, spec,
      [&](std::span<const double> x, std::span<const double> u, const Interventions& iv) {
        return counterfactual(m, x, u, iv);
      },
      [&](std::span<const double> x, std::span<const double> u) { return m.reconstruct(x, u); });
}

inline Fidelity evaluate_fidelity(const FlatSurrogate& m, const CellData& cell, const std::vector<int>& labels,
                                  std::size_t K, Variant v, const EvalSpec& spec) {
  return evaluate_fidelity(
      cell, labels, K, v, spec,
      [&](std::span<const double> x, std::span<const double> u, const Interventions& iv) {
        return m.counterfactual(x, u, iv);
      },
      [&](std::span<const double> x, std::span<const double> u) { return m.reconstruct(x, u); });
}

// ------------------------------------------------------------- decisions

struct DecisionRecord {
  std::size_t row = 0;
  int root_cause = -1;
  int label = 0;
  InterventionPlan plan;
  std::vector<NodeIndex> miccd_rank;
  std::vector<NodeIndex> naive_rank;
  double reference_cost = 0.0;
};

/// Cost of the canonical fix: the root-cause variable set to its
/// normal-regime conditional mean given its observed parents.
inline double reference_cost(const Scm& scm, std::span<const double> x, NodeIndex root, const CostModel& cm) {
  const CausalGraph& g = scm.graph;
  std::vector<double> xf = feature_vector(g, x), ref = xf;
  const auto& vars = g.variables();
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (vars[k] == root) ref[k] = scm.mechanisms[root].evaluate(x) + scm.noise.normal[root].mean;
  return cost(cm, ref, xf);
}

inline DecisionOpts decision_options(const DecisionSpec& spec, const CellData& cell, std::uint64_t seed) {
  const auto [mean, sd] = normal_stats(cell.train);
  DecisionOpts o;
  o.iota = spec.iota;
  o.threshold = cell.scm.threshold_value();
  o.samples = spec.samples;
  o.tau = spec.tau;
  o.y_sd = sd[static_cast<Eigen::Index>(cell.scm.graph.target())];
  o.restarts = spec.restarts;
  o.max_iter = spec.max_iter;
  o.step_tol = spec.step_tol;
  o.constraint_tol = spec.constraint_tol;
  o.seed = seed;
  for (NodeIndex v : cell.scm.graph.variables()) o.normal_means.push_back(mean[static_cast<Eigen::Index>(v)]);
  return o;
}

/// Abnormal test rows (anomalous regime and y > t) chosen for decisions.
inline std::vector<std::size_t> decision_rows(const CellData& cell, std::size_t count) {
  std::vector<std::size_t> rows;
  for (std::size_t i : anomalous_rows(cell.test))
    if (cell.test.y_abnormal[i]) rows.push_back(i);
  return spread(rows, count);
}

inline std::vector<DecisionRecord> decide_cell(const SurrogateModel& model, const CellData& cell,
                                               const std::vector<int>& test_labels, std::size_t K,
                                               const DecisionSpec& spec, const CostModel& cm, std::uint64_t seed) {
  const CausalGraph& g = cell.scm.graph;
  const auto [mean, sd] = normal_stats(cell.train);
  std::vector<double> fmean, fsd;
  for (NodeIndex v : g.variables()) {
    fmean.push_back(mean[static_cast<Eigen::Index>(v)]);
    fsd.push_back(sd[static_cast<Eigen::Index>(v)]);
  }
  std::vector<DecisionRecord> out;
  for (std::size_t i : decision_rows(cell, spec.rows)) {
    const Eigen::VectorXd x = cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const std::span<const double> xs(x.data(), x.size());
    DecisionRecord r;
    r.row = i;
    r.root_cause = cell.test.root_cause[i];
    r.label = test_labels[i];
    const std::vector<double> u = variant_label(r.label, K, Variant::full);
    r.plan = solve_min_cost(model, xs, u, cm, decision_options(spec, cell, derive_seed(seed, i)));
    r.miccd_rank = rank_variables(r.plan, cm);
    for (std::size_t k : naive_rca_rank(feature_vector(g, xs), fmean, fsd)) r.naive_rank.push_back(g.variables()[k]);
    r.reference_cost = reference_cost(cell.scm, xs, static_cast<NodeIndex>(r.root_cause), cm);
    out.push_back(std::move(r));
  }
  return out;
}

struct MethodScores {
  double f1 = 0.0;
  std::map<std::size_t, double> ndcg;  // k -> mean nDCG@k
};

struct DecisionScores {
  MethodScores miccd, naive;
  double n_cost_mean = 0.0, n_cost_std = 0.0;
  double feasible_rate = 0.0;
  std::size_t rows = 0;
};

/// Decision summary as stored per cell.
struct DecisionSummaryRow {
  int root_cause = -1;
  std::vector<NodeIndex> miccd_rank, naive_rank;
  double cost = 0.0, reference_cost = 0.0;
  bool feasible = false;
};

inline DecisionScores score_decisions(const std::vector<DecisionSummaryRow>& rows, const std::vector<std::size_t>& ks) {
  DecisionScores s;
  s.rows = rows.size();
  if (rows.empty()) return s;
  std::vector<int> truth, pm, pn;
  std::vector<double> nc;
  double feasible = 0.0;
  for (const auto& r : rows) {
    truth.push_back(r.root_cause);
    pm.push_back(static_cast<int>(r.miccd_rank.at(0)));
    pn.push_back(static_cast<int>(r.naive_rank.at(0)));
    nc.push_back(normalized_cost(r.cost, r.reference_cost));
    feasible += r.feasible;
  }
  s.miccd.f1 = f1_score(pm, truth, F1Mode::macro);
  s.naive.f1 = f1_score(pn, truth, F1Mode::macro);
  for (std::size_t k : ks) {
    double am = 0.0, an = 0.0;
    for (const auto& r : rows) {
      const NodeSet rel{static_cast<NodeIndex>(r.root_cause)};
      am += ndcg_at_k(r.miccd_rank, rel, k);
      an += ndcg_at_k(r.naive_rank, rel, k);
    }
    s.miccd.ndcg[k] = am / static_cast<double>(rows.size());
    s.naive.ndcg[k] = an / static_cast<double>(rows.size());
  }
  const double n = static_cast<double>(nc.size());
  for (double v : nc) s.n_cost_mean += v / n;
  for (double v : nc) s.n_cost_std += (v - s.n_cost_mean) * (v - s.n_cost_mean) / n;
  s.n_cost_std = std::sqrt(s.n_cost_std);
  s.feasible_rate = feasible / n;
  return s;
}

inline DecisionSummaryRow summarize(const DecisionRecord& r) {
  return {r.root_cause, r.miccd_rank, r.naive_rank, r.plan.cost, r.reference_cost, r.plan.feasible};
}

}  // namespace miccd
