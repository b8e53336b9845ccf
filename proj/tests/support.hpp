#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "miccd/graph.hpp"
#include "miccd/rng.hpp"
#include "miccd/scm.hpp"
#include "miccd/vae.hpp"

namespace miccd::support {

/// Every DAG on 1..max_nodes nodes whose last node is the target (a sink).
inline std::vector<CausalGraph> all_small_dags(std::size_t max_nodes = 4) {
  std::vector<CausalGraph> out;
  for (std::size_t n = 1; n <= max_nodes; ++n) {
    const NodeIndex target = n - 1;
    std::vector<Edge> pairs;
    for (NodeIndex i = 0; i < n; ++i)
      for (NodeIndex j = 0; j < n; ++j)
        if (i != j && i != target) pairs.emplace_back(i, j);
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << pairs.size()); ++mask) {
      std::vector<Edge> edges;
      for (std::size_t b = 0; b < pairs.size(); ++b)
        if (mask >> b & 1) edges.push_back(pairs[b]);
      try {
        out.push_back(build_graph(n, edges, target));
      } catch (const CycleError&) {
      }
    }
  }
  return out;
}

/// Linear SCM with weights uniform in +-[0.5, 2] and unit normal noise.
inline Scm random_linear_scm(const CausalGraph& g, std::uint64_t seed) {
  Scm scm = sample_mechanisms(g, Strength::medium, Nonlinearity::identity, seed);
  Rng rng(derive_seed(seed, 77));
  for (auto& m : scm.mechanisms)
    for (double& w : m.weights) w = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 2.0);
  return scm;
}

/// Y = X1 with unit weight, no noise and threshold 0.5.
inline Scm identity_scm_1d() {
  Scm scm = sample_mechanisms(build_graph(2, {{0, 1}}, 1), Strength::medium, Nonlinearity::identity, 0);
  scm.mechanisms[1].weights = {1.0};
  scm.threshold = 0.5;
  return scm;
}

/// Central difference at steps 1e-2 .. 1e-7. Each estimate is scored by
/// its disagreement with the next smaller step plus the rounding error of
/// the loss at that step. From the best pair, the larger step is returned
/// when its truncation error is below the rounding error of the smaller
/// one, else the Richardson combination of both. Large steps lose to curvature and activation kinks,
/// small ones to rounding.
inline double numeric_derivative(Eigen::VectorXd& params, Eigen::Index k, const std::function<double()>& loss) {
  constexpr std::array<double, 6> steps{1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7};
  std::array<double, 6> d{};
  const double scale = std::max(1.0, std::abs(loss()));
  const double keep = params[k];
  for (std::size_t i = 0; i < steps.size(); ++i) {
    params[k] = keep + steps[i];
    const double up = loss();
    params[k] = keep - steps[i];
    const double down = loss();
    d[i] = (up - down) / (2.0 * steps[i]);
  }
  params[k] = keep;
  auto rounding = [&](std::size_t i) { return 4.0 * std::numeric_limits<double>::epsilon() * scale / steps[i]; };
  auto score = [&](std::size_t i) { return std::abs(d[i] - d[i + 1]) + rounding(i + 1); };
  std::size_t best = 0;
  for (std::size_t i = 1; i + 1 < d.size(); ++i)
    if (score(i) < score(best)) best = i;
  if (std::abs(d[best] - d[best + 1]) < rounding(best + 1)) return d[best];
  return d[best + 1] + (d[best + 1] - d[best]) / 99.0;
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over all
/// coordinates.
inline double max_relative_error(Eigen::VectorXd& params, const Eigen::VectorXd& analytic,
                                 const std::function<double()>& loss, double floor) {
  double worst = 0.0;
  for (Eigen::Index k = 0; k < params.size(); ++k) {
    const double numeric = numeric_derivative(params, k, loss);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
  }
  return worst;
}

/// Scaled per-batch VAE objective and its analytic gradients.
inline double vae_objective(const GaussianVae& vae, const VaeBatch& b, double obs_var, double kl_weight,
                            VaeGrads* grads = nullptr) {
  const VaeTerms t = vae_terms(vae, b, obs_var, kl_weight, grads);
  return (t.reconstruction_nll + kl_weight * t.kl) / static_cast<double>(b.target.cols());
}

/// Fresh per-test scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path p = std::filesystem::path(MICCD_WORK_DIR) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Contents of every regular file under `root`, keyed by relative path.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[std::filesystem::relative(e.path(), root).generic_string()] = ss.str();
  }
  return out;
}

}  // namespace miccd::support
