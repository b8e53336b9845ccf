#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "miccd/scm.hpp"
#include "support.hpp"

using namespace miccd;

namespace {

/// SCM over `g` with every weight set to `w` and unit normal noise.
Scm constant_weight_scm(const CausalGraph& g, double w) {
  Scm scm = sample_mechanisms(g, Strength::medium, Nonlinearity::identity, 0);
  for (auto& m : scm.mechanisms) std::fill(m.weights.begin(), m.weights.end(), w);
  return scm;
}

double corr(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd da = a.array() - a.mean(), db = b.array() - b.mean();
  return (da * db).sum() / std::sqrt(da.square().sum() * db.square().sum());
}

}  // namespace

TEST(GenerateGraph, ChainEdges) {
  const CausalGraph g = generate_random_graph(4, GraphStructure::chain, 0.3, 11);
  EXPECT_EQ(g.edges(), (std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}, {3, 4}}));
  EXPECT_EQ(g.target(), 4u);
  const CausalGraph one = generate_random_graph(1, GraphStructure::chain, 0.3, 0);
  EXPECT_EQ(one.edges(), (std::vector<Edge>{{0, 1}}));
}

TEST(GenerateGraph, RandomDensityNearSparsity) {
  double density = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const CausalGraph g = generate_random_graph(10, GraphStructure::random, 0.2, s);
    const double pairs = 11.0 * 10.0 / 2.0;
    density += static_cast<double>(g.edges().size()) / pairs / 100.0;
    EXPECT_FALSE(g.parents(g.target()).empty());
  }
  EXPECT_GE(density, 0.15);
  EXPECT_LE(density, 0.25);
}

TEST(GenerateGraph, DeterministicPerSeed) {
  const auto a = generate_random_graph(8, GraphStructure::random, 0.3, 5);
  const auto b = generate_random_graph(8, GraphStructure::random, 0.3, 5);
  EXPECT_EQ(a.edges(), b.edges());
}

TEST(SampleMechanisms, MediumWeightRange) {
  std::size_t seen = 0;
  for (std::uint64_t s = 0; seen < 1000; ++s) {
    const Scm scm = sample_mechanisms(generate_random_graph(10, GraphStructure::random, 0.5, s), Strength::medium,
                                      Nonlinearity::identity, s);
    for (const auto& m : scm.mechanisms)
      for (double w : m.weights) {
        EXPECT_GE(std::abs(w), 0.5);
        EXPECT_LE(std::abs(w), 1.0);
        ++seen;
      }
  }
}

TEST(SampleMechanisms, DeterministicAndEdgeless) {
  const CausalGraph g = generate_random_graph(6, GraphStructure::random, 0.4, 2);
  EXPECT_EQ(scm_to_json(sample_mechanisms(g, Strength::strong, Nonlinearity::tanh, 9)),
            scm_to_json(sample_mechanisms(g, Strength::strong, Nonlinearity::tanh, 9)));
  const Scm empty = sample_mechanisms(build_graph(3, {}, 2), Strength::weak, Nonlinearity::identity, 0);
  for (const auto& m : empty.mechanisms) EXPECT_TRUE(m.weights.empty());
}

TEST(ComputeThreshold, StandardNormalQuantiles) {
  Scm scm = sample_mechanisms(build_graph(1, {}, 0), Strength::medium, Nonlinearity::identity, 0);
  EXPECT_NEAR(compute_threshold(scm, 0.5, 10000, 1), 0.0, 0.05);
  EXPECT_NEAR(compute_threshold(scm, 0.95, 10000, 1), 1.645, 0.05);
  EXPECT_DOUBLE_EQ(scm.threshold_value(), *scm.threshold);
}

TEST(ComputeThreshold, ConstantTarget) {
  Scm scm = sample_mechanisms(build_graph(1, {}, 0), Strength::medium, Nonlinearity::identity, 0);
  scm.noise.normal[0] = {2.5, 0.0};
  EXPECT_DOUBLE_EQ(compute_threshold(scm, 0.95, 100, 0), 2.5);
}

TEST(SimulateDataset, RequiresThreshold) {
  const Scm scm = sample_mechanisms(build_graph(2, {{0, 1}}, 1), Strength::medium, Nonlinearity::identity, 0);
  EXPECT_THROW(simulate_dataset(scm, {}, 0, 10, 0), ThresholdUnset);
}

TEST(SimulateDataset, RootMeanWithinClt) {
  Scm scm = constant_weight_scm(generate_random_graph(3, GraphStructure::chain, 0.3, 0), 1.0);
  compute_threshold(scm, 0.95, 1000, 0);
  const LabeledDataset ds = simulate_dataset(scm, {}, 0, 5000, 3);
  EXPECT_LT(std::abs(ds.values.col(0).mean()), 3.0 / std::sqrt(5000.0));
}

TEST(SimulateDataset, ChainCorrelation) {
  Scm scm = constant_weight_scm(build_graph(3, {{0, 1}, {1, 2}}, 2), 0.8);
  compute_threshold(scm, 0.95, 1000, 0);
  const LabeledDataset ds = simulate_dataset(scm, {}, 0, 20000, 4);
  EXPECT_NEAR(corr(ds.values.col(0), ds.values.col(1)), 0.8 / std::sqrt(1.64), 0.03);
}

TEST(SimulateDataset, LabelsAndInvariants) {
  const CausalGraph g = generate_random_graph(5, GraphStructure::chain, 0.3, 0);
  Scm scm = sample_mechanisms(g, Strength::medium, Nonlinearity::identity, 0);
  compute_threshold(scm, 0.9, 2000, 0);
  const auto patterns = make_patterns(scm, 3, 0);
  const LabeledDataset ds = simulate_dataset(scm, patterns, 50, 100, 7);
  ASSERT_EQ(ds.rows(), 250u);
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    const double y = ds.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g.target()));
    EXPECT_EQ(ds.y_abnormal[i], y > *scm.threshold ? 1 : 0);
    EXPECT_EQ(ds.pattern_id[i] == -1, ds.root_cause[i] == -1);
    if (i >= 100) {
      const auto& p = patterns[(i - 100) / 50];
      EXPECT_EQ(ds.pattern_id[i], p.id);
      EXPECT_EQ(ds.root_cause[i], static_cast<int>(p.node));
    }
  }
  for (const auto& p : patterns) EXPECT_NE(p.node, g.target());
}

TEST(SimulateDataset, SameSeedSameBits) {
  Scm scm = sample_mechanisms(generate_random_graph(5, GraphStructure::random, 0.4, 1), Strength::medium,
                              Nonlinearity::tanh, 1);
  compute_threshold(scm, 0.95, 1000, 1);
  const auto patterns = make_patterns(scm, 2, 1);
  const auto a = simulate_dataset(scm, patterns, 20, 30, 9), b = simulate_dataset(scm, patterns, 20, 30, 9);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.noise, b.noise);
}

TEST(OracleCounterfactual, ChainExample) {
  const Scm scm = constant_weight_scm(build_graph(3, {{0, 1}, {1, 2}}, 2), 1.0);
  const std::vector<double> z{1, 0, 0};
  EXPECT_EQ(scm.propagate(z), Eigen::Vector3d(1, 1, 1));
  EXPECT_EQ(oracle_counterfactual(scm, z, {{0, 2.0}}), Eigen::Vector3d(2, 2, 2));
  EXPECT_EQ(oracle_counterfactual(scm, z, {}), scm.propagate(z));
  EXPECT_THROW(oracle_counterfactual(scm, z, {{2, 0.0}}), InterventionOnTarget);
  EXPECT_THROW(oracle_counterfactual(scm, z, {{7, 0.0}}), IndexOutOfRange);
}

TEST(OracleCounterfactual, DiamondOneBranch) {
  const Scm scm = constant_weight_scm(build_graph(4, {{0, 1}, {0, 2}, {1, 3}, {2, 3}}, 3), 1.0);
  const std::vector<double> z{1, 0.5, -0.5, 0.25};
  // factual: x1 = 1, x2 = 1.5, x3 = 0.5, y = 2.25
  const Eigen::VectorXd cf = oracle_counterfactual(scm, z, {{1, 3.0}});
  EXPECT_DOUBLE_EQ(cf[0], 1.0);
  EXPECT_DOUBLE_EQ(cf[1], 3.0);
  EXPECT_DOUBLE_EQ(cf[2], 0.5);
  EXPECT_DOUBLE_EQ(cf[3], 3.0 + 0.5 + 0.25);
}

TEST(OracleCounterfactual, NonAncestorNeverMovesTarget) {
  for (const CausalGraph& g : support::all_small_dags()) {
    const NodeSet anc = g.ancestors(g.target());
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Scm scm = support::random_linear_scm(g, s);
      Rng rng(s + 100);
      std::vector<double> z(g.node_count());
      for (double& v : z) v = rng.normal();
      const double y = scm.propagate(z)[static_cast<Eigen::Index>(g.target())];
      for (NodeIndex i : g.variables())
        if (!contains(anc, i))
          EXPECT_DOUBLE_EQ(oracle_counterfactual(scm, z, {{i, rng.normal(0, 5)}})[static_cast<Eigen::Index>(g.target())], y);
    }
  }
}

TEST(OracleCounterfactual, AffineInInterventionValue) {
  const CausalGraph g = generate_random_graph(6, GraphStructure::random, 0.5, 3);
  const Scm scm = sample_mechanisms(g, Strength::strong, Nonlinearity::identity, 3);
  const std::vector<double> z{0.3, -1.0, 0.2, 0.7, -0.4, 1.1, 0.0};
  for (NodeIndex i : g.variables()) {
    const Eigen::VectorXd a = oracle_counterfactual(scm, z, {{i, -1.0}});
    const Eigen::VectorXd b = oracle_counterfactual(scm, z, {{i, 0.5}});
    const Eigen::VectorXd c = oracle_counterfactual(scm, z, {{i, 2.0}});
    EXPECT_LT(((b - a) - (c - b)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DatasetCsv, RoundTripWithHeaders) {
  const CausalGraph g = generate_random_graph(3, GraphStructure::chain, 0.3, 0);
  Scm scm = sample_mechanisms(g, Strength::medium, Nonlinearity::identity, 0);
  compute_threshold(scm, 0.95, 500, 0);
  const auto patterns = make_patterns(scm, 2, 0);
  const LabeledDataset ds = simulate_dataset(scm, patterns, 5, 5, 1);
  const auto dir = support::scratch_dir("scm_csv");
  write_dataset((dir / "d.csv").string(), (dir / "z.csv").string(), g, ds);
  const csv::Table t = csv::read((dir / "d.csv").string());
  EXPECT_EQ(t.header, (std::vector<std::string>{"x_1", "x_2", "x_3", "y", "pattern_id", "root_cause", "y_abnormal"}));
  EXPECT_EQ(csv::read((dir / "z.csv").string()).header, (std::vector<std::string>{"z_1", "z_2", "z_3", "z_4"}));
  const LabeledDataset back = read_dataset((dir / "d.csv").string(), (dir / "z.csv").string(), g);
  EXPECT_EQ(back.values, ds.values);
  EXPECT_EQ(back.noise, ds.noise);
  EXPECT_EQ(back.pattern_id, ds.pattern_id);
  EXPECT_EQ(back.root_cause, ds.root_cause);
  EXPECT_EQ(back.y_abnormal, ds.y_abnormal);
}

TEST(ScmJson, RoundTrip) {
  Scm scm = sample_mechanisms(generate_random_graph(5, GraphStructure::random, 0.4, 2), Strength::weak,
                              Nonlinearity::tanh, 2);
  compute_threshold(scm, 0.95, 500, 2);
  const nlohmann::json j = scm_to_json(scm);
  EXPECT_EQ(scm_to_json(scm_from_json(j)), j);
  const auto patterns = make_patterns(scm, 3, 2);
  EXPECT_EQ(patterns_to_json(patterns_from_json(patterns_to_json(patterns))), patterns_to_json(patterns));
}
