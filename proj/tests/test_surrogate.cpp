#include <cmath>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "miccd/config.hpp"
#include "miccd/decision.hpp"
#include "miccd/flat_surrogate.hpp"
#include "miccd/harness.hpp"
#include "miccd/metrics.hpp"
#include "miccd/surrogate.hpp"
#include "support.hpp"

using namespace miccd;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const Eigen::Map<const Eigen::ArrayXd> x(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const Eigen::ArrayXd> y(b.data(), static_cast<Eigen::Index>(b.size()));
  const Eigen::ArrayXd dx = x - x.mean(), dy = y - y.mean();
  return (dx * dy).sum() / std::sqrt(dx.square().sum() * dy.square().sum());
}

/// Chain-5 cell with default sizes, clustered, and the full model trained
/// once with the default training config.
struct TrainedChain {
  CellData cell;
  ClusterOutcome cluster;
  SurrogateModel model;
  TrainReport report;
};

const TrainedChain& trained_chain() {
  static const std::unique_ptr<TrainedChain> t = [] {
    auto p = std::make_unique<TrainedChain>();
    p->cell = generate_cell(DatasetSpec{}, AnomalySpec{}, 0);
    p->cluster = cluster_cell(p->cell, ClusterSpec{}, 2, 0);
    TrainConfig cfg;
    cfg.seed = 1;
    p->model = train_surrogate(p->cell.train, variant_labels(p->cluster.train_labels, p->cluster.K, Variant::full),
                               p->cell.scm.graph, cfg, &p->report);
    return p;
  }();
  return *t;
}

std::vector<double> label_of(const TrainedChain& t, std::size_t row) {
  return variant_label(t.cluster.test_labels[row], t.cluster.K, Variant::full);
}

LabeledDataset tiny_chain_data(std::size_t rows, std::uint64_t seed, Scm* out_scm = nullptr) {
  Scm scm = sample_mechanisms(generate_random_graph(3, GraphStructure::chain, 0.3, seed), Strength::medium,
                              Nonlinearity::identity, seed);
  compute_threshold(scm, 0.95, 500, seed);
  const auto patterns = make_patterns(scm, 2, seed);
  if (out_scm) *out_scm = scm;
  return simulate_dataset(scm, patterns, rows / 4, rows / 2, seed);
}

}  // namespace

TEST(Kl, ClosedForm) {
  EXPECT_DOUBLE_EQ(gaussian_kl(0.3, -0.2, 0.3, -0.2), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_kl(0.0, 0.0, 1.0, 0.0), 0.5);
  Rng rng(1);
  for (int i = 0; i < 100; ++i)
    EXPECT_GE(gaussian_kl(rng.normal(), rng.normal(), rng.normal(), rng.normal()), 0.0);
}

TEST(NodeElbo, TotalIsSumOfNodeTerms) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(80, 2, &scm);
  const Eigen::MatrixXd u = one_hot(std::vector<int>(data.rows(), 1), 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  const SurrogateModel m = train_surrogate(data, u, scm.graph, cfg);
  Rng rng(9);
  double manual = 0.0;
  for (NodeIndex j = 0; j < scm.graph.node_count(); ++j) {
    Eigen::RowVectorXd eps(static_cast<Eigen::Index>(data.rows()));
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    const NodeElbo e = node_elbo(m, j, data.values, u, eps);
    EXPECT_GE(e.kl, 0.0);
    manual += e.reconstruction - e.kl;
  }
  EXPECT_NEAR(dataset_elbo(m, data.values, u, 9), manual, 1e-9);
}

TEST(NodeElbo, GradientsMatchFiniteDifferencesJointly) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(40, 3, &scm);
  std::vector<int> labels(data.rows());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = data.pattern_id[i] < 0 ? 2 : data.pattern_id[i];
  const Eigen::MatrixXd u = one_hot(labels, 3);
  TrainConfig cfg;
  cfg.seed = 4;
  const auto [mean, sd] = detail::column_stats(data.values);
  SurrogateModel m(scm.graph, 3, mean, sd, cfg);
  const Eigen::MatrixXd s = m.standardize(data.values.transpose()).leftCols(6);
  const Eigen::MatrixXd lab = u.transpose().leftCols(6);
  Rng rng(5);
  for (NodeIndex j = 0; j < scm.graph.node_count(); ++j) {
    Eigen::MatrixXd eps(1, 6);
    for (Eigen::Index c = 0; c < 6; ++c) eps(0, c) = rng.normal();
    const VaeBatch b = m.node_batch(j, s, lab, eps);
    GaussianVae& vae = m.nodes()[j].vae;
    VaeGrads g;
    support::vae_objective(vae, b, cfg.obs_var, 1.0, &g);
    auto loss = [&] { return support::vae_objective(vae, b, cfg.obs_var, 1.0); };
    EXPECT_LT(support::max_relative_error(vae.encoder.params(), g.encoder, loss, 1e-3), 1e-4);
    EXPECT_LT(support::max_relative_error(vae.prior.params(), g.prior, loss, 1e-3), 1e-4);
    EXPECT_LT(support::max_relative_error(vae.decoder.params(), g.decoder, loss, 1e-3), 1e-4);
  }
}

TEST(TrainSurrogate, ElboImproves) {
  const TrainedChain& t = trained_chain();
  ASSERT_EQ(t.report.epoch_elbo.size(), 20u);
  EXPECT_GE(t.report.epoch_elbo.back(), t.report.initial_elbo);
}

TEST(TrainSurrogate, ReconstructionOnHeldOutData) {
  const TrainedChain& t = trained_chain();
  const CausalGraph& g = t.cell.scm.graph;
  std::vector<std::vector<double>> pred(g.node_count()), truth(g.node_count());
  for (std::size_t i = 0; i < t.cell.test.rows(); ++i) {
    const Eigen::VectorXd x = t.cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const Eigen::VectorXd r = t.model.reconstruct(std::span<const double>(x.data(), x.size()), label_of(t, i));
    for (NodeIndex j = 0; j < g.node_count(); ++j) {
      pred[j].push_back(r[static_cast<Eigen::Index>(j)]);
      truth[j].push_back(x[static_cast<Eigen::Index>(j)]);
    }
  }
  double acc = 0.0;
  for (NodeIndex j = 0; j < g.node_count(); ++j) acc += r_mse(pred[j], truth[j]);
  EXPECT_LE(acc / static_cast<double>(g.node_count()), 0.1);
}

TEST(Abduct, RecoversTrueNoise) {
  const TrainedChain& t = trained_chain();
  const CausalGraph& g = t.cell.scm.graph;
  std::vector<std::vector<double>> est(g.node_count()), truth(g.node_count());
  for (std::size_t i = 0; i < t.cell.test.rows(); ++i) {
    const Eigen::VectorXd x = t.cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const Posterior p = t.model.abduct(std::span<const double>(x.data(), x.size()), label_of(t, i));
    for (NodeIndex j = 0; j < g.node_count(); ++j) {
      est[j].push_back(p.mean[static_cast<Eigen::Index>(j)]);
      truth[j].push_back(t.cell.test.noise(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
  }
  for (NodeIndex j = 0; j < g.node_count(); ++j) EXPECT_GE(std::abs(pearson(est[j], truth[j])), 0.9) << "node " << j;
}

TEST(Abduct, TeacherForcedDecodeRoundTrip) {
  const TrainedChain& t = trained_chain();
  const CausalGraph& g = t.cell.scm.graph;
  std::vector<std::vector<double>> pred(g.node_count()), truth(g.node_count());
  for (std::size_t i = 0; i < t.cell.test.rows(); ++i) {
    const Eigen::VectorXd x = t.cell.test.values.row(static_cast<Eigen::Index>(i)).transpose();
    const auto u = label_of(t, i);
    const Posterior p = t.model.abduct(std::span<const double>(x.data(), x.size()), u);
    for (NodeIndex j = 0; j < g.node_count(); ++j) {
      Eigen::RowVectorXd z(1);
      z[0] = p.mean[static_cast<Eigen::Index>(j)];
      pred[j].push_back(t.model.decode(j, Eigen::MatrixXd(x), z, u)[0]);
      truth[j].push_back(x[static_cast<Eigen::Index>(j)]);
    }
  }
  for (NodeIndex j = 0; j < g.node_count(); ++j) EXPECT_LE(r_mse(pred[j], truth[j]), 0.1) << "node " << j;
}

TEST(Abduct, DeterministicAndShapeChecked) {
  const TrainedChain& t = trained_chain();
  const Eigen::VectorXd x = t.cell.test.values.row(0).transpose();
  const std::span<const double> xs(x.data(), x.size());
  const Posterior a = t.model.abduct(xs, label_of(t, 0)), b = t.model.abduct(xs, label_of(t, 0));
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.sd, b.sd);
  EXPECT_THROW(t.model.abduct(xs.first(3), label_of(t, 0)), ShapeMismatch);
  EXPECT_THROW(t.model.abduct(xs, std::vector<double>{1.0}), ShapeMismatch);
}

TEST(Reconstruct, RootDependsOnlyOnNoiseAndLabel) {
  const TrainedChain& t = trained_chain();
  Eigen::VectorXd x = t.cell.test.values.row(3).transpose();
  const auto u = label_of(t, 3);
  const Posterior p = t.model.abduct(std::span<const double>(x.data(), x.size()), u);
  Eigen::RowVectorXd z(1);
  z[0] = p.mean[0];
  const double root = t.model.decode(0, Eigen::MatrixXd(x), z, u)[0];
  x.tail(x.size() - 1).setConstant(123.0);
  EXPECT_DOUBLE_EQ(t.model.decode(0, Eigen::MatrixXd(x), z, u)[0], root);
}

TEST(Counterfactual, MatchesOracleOnChain) {
  const TrainedChain& t = trained_chain();
  EvalSpec spec;
  const Fidelity f = evaluate_fidelity(t.model, t.cell, t.cluster.test_labels, t.cluster.K, Variant::full, spec);
  EXPECT_LE(f.cf_rmse, 0.1);
  EXPECT_LE(f.recon_rmse, 0.1);
}

TEST(Checkpoint, RoundTripGivesIdenticalOutputs) {
  const TrainedChain& t = trained_chain();
  const nlohmann::json j = surrogate_to_json(t.model);
  const SurrogateModel back = surrogate_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(surrogate_to_json(back), j);
  const Eigen::VectorXd x = t.cell.test.values.row(5).transpose();
  const std::span<const double> xs(x.data(), x.size());
  EXPECT_EQ(back.reconstruct(xs, label_of(t, 5)), t.model.reconstruct(xs, label_of(t, 5)));
  nlohmann::json bad = j;
  bad["nodes"].erase(0);
  EXPECT_THROW(surrogate_from_json(bad), FormatError);
}

TEST(Standardization, IdentityStatsOnPreStandardizedDataAgree) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(60, 6, &scm);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(data.rows()), 1);
  const auto [mean, sd] = detail::column_stats(data.values);
  TrainConfig cfg;
  cfg.seed = 8;
  const SurrogateModel raw(scm.graph, 1, mean, sd, cfg);
  const Eigen::Index N = mean.size();
  const SurrogateModel unit(scm.graph, 1, Eigen::VectorXd::Zero(N), Eigen::VectorXd::Ones(N), cfg);
  LabeledDataset pre = data;
  pre.values = raw.standardize(data.values.transpose()).transpose();
  for (NodeIndex j = 0; j < scm.graph.node_count(); ++j) {
    const NodeElbo a = node_elbo(raw, j, data.values, u), b = node_elbo(unit, j, pre.values, u);
    EXPECT_NEAR(a.reconstruction, b.reconstruction, 1e-9);
    EXPECT_NEAR(a.kl, b.kl, 1e-9);
  }
  const std::vector<double> one{1.0};
  for (Eigen::Index i = 0; i < 5; ++i) {
    const Eigen::VectorXd x = data.values.row(i).transpose(), xp = pre.values.row(i).transpose();
    const Eigen::VectorXd r = raw.reconstruct(std::span<const double>(x.data(), x.size()), one);
    const Eigen::VectorXd rp = unit.reconstruct(std::span<const double>(xp.data(), xp.size()), one);
    EXPECT_LT((r - (rp.array() * sd.array() + mean.array()).matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(TrainSurrogate, ConstantVariableReconstructsExactly) {
  const CausalGraph g = build_graph(3, {{0, 1}, {1, 2}}, 2);
  Scm scm = sample_mechanisms(g, Strength::medium, Nonlinearity::identity, 0);
  scm.noise.normal[0] = {4.0, 0.0};
  compute_threshold(scm, 0.95, 500, 0);
  const LabeledDataset data = simulate_dataset(scm, {}, 0, 200, 1);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Ones(200, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  const SurrogateModel m = train_surrogate(data, u, g, cfg);
  for (Eigen::Index i = 0; i < 10; ++i) {
    const Eigen::VectorXd x = data.values.row(i).transpose();
    EXPECT_NEAR(m.reconstruct(std::span<const double>(x.data(), x.size()), std::vector<double>{1.0})[0], 4.0, 1e-3);
  }
}

TEST(TrainSurrogate, RejectsBadInputs) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(40, 7, &scm);
  EXPECT_THROW(train_surrogate(data, Eigen::MatrixXd::Ones(3, 1), scm.graph, TrainConfig{}), ShapeMismatch);
  EXPECT_THROW(train_surrogate(data, Eigen::MatrixXd::Ones(40, 1), build_graph(2, {{0, 1}}, 1), TrainConfig{}),
               ShapeMismatch);
}

TEST(FlatSurrogate, TrainsAndRoundTrips) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(120, 9, &scm);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(data.rows()), 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  const FlatSurrogate m = train_flat_surrogate(data, u, scm.graph, cfg);
  const FlatSurrogate back = flat_surrogate_from_json(nlohmann::json::parse(flat_surrogate_to_json(m).dump()));
  const Eigen::VectorXd x = data.values.row(0).transpose();
  const std::span<const double> xs(x.data(), x.size());
  const std::vector<double> one{1.0};
  EXPECT_EQ(back.reconstruct(xs, one), m.reconstruct(xs, one));
  const Eigen::VectorXd cf = m.counterfactual(xs, one, {{0, 2.5}});
  EXPECT_DOUBLE_EQ(cf[0], 2.5);
  EXPECT_EQ(m.counterfactual(xs, one, {}), x);
  EXPECT_THROW(m.counterfactual(xs, one, {{scm.graph.target(), 0.0}}), InterventionOnTarget);
}

TEST(FlatSurrogate, ElboGradientsMatchFiniteDifferences) {
  Scm scm;
  const LabeledDataset data = tiny_chain_data(40, 10, &scm);
  const auto [mean, sd] = detail::column_stats(data.values);
  TrainConfig cfg;
  FlatSurrogate m(scm.graph, 2, mean, sd, cfg);
  const Eigen::MatrixXd s = m.standardize(data.values.transpose()).leftCols(5);
  Eigen::MatrixXd lab = Eigen::MatrixXd::Zero(2, 5);
  lab.row(0).setOnes();
  Rng rng(11);
  Eigen::MatrixXd eps(static_cast<Eigen::Index>(scm.graph.node_count()), 5);
  for (Eigen::Index r = 0; r < eps.rows(); ++r)
    for (Eigen::Index c = 0; c < eps.cols(); ++c) eps(r, c) = rng.normal();
  const VaeBatch b = m.batch(s, lab, eps);
  GaussianVae& vae = m.vae();
  VaeGrads g;
  support::vae_objective(vae, b, cfg.obs_var, 1.0, &g);
  auto loss = [&] { return support::vae_objective(vae, b, cfg.obs_var, 1.0); };
  EXPECT_LT(support::max_relative_error(vae.encoder.params(), g.encoder, loss, 1e-3), 1e-4);
  EXPECT_LT(support::max_relative_error(vae.prior.params(), g.prior, loss, 1e-3), 1e-4);
  EXPECT_LT(support::max_relative_error(vae.decoder.params(), g.decoder, loss, 1e-3), 1e-4);
}
