#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/error.hpp"
#include "miccd/rng.hpp"

namespace miccd {

inline constexpr double kVarianceFloor = 1e-6;

/// Diagonal-covariance Gaussian mixture.
struct GmmModel {
  Eigen::MatrixXd means;      // K x m
  Eigen::MatrixXd variances;  // K x m
  Eigen::VectorXd weights;    // K
  double log_likelihood = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  /// Per-iteration log-likelihood of the winning restart.
  std::vector<double> trace;
  /// False if any restart saw the log-likelihood decrease between two EM
  /// iterations (beyond round-off).
  bool monotone = true;

  std::size_t k() const { return static_cast<std::size_t>(means.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(means.cols()); }
};

struct GmmOptions {
  double tol = 1e-6;
  int max_iter = 200;
  int restarts = 5;
};

struct PatternLabels {
  std::vector<int> hard;
  Eigen::MatrixXd responsibilities;  // n x K
};

namespace detail {

/// log N(x | mean, diag(var)) for each component; returns n x K.
inline Eigen::MatrixXd component_log_density(const GmmModel& g, const Eigen::MatrixXd& data) {
  const Eigen::Index n = data.rows(), K = g.means.rows(), m = data.cols();
  Eigen::MatrixXd out(n, K);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::RowVectorXd mu = g.means.row(k), var = g.variances.row(k);
    const double norm = -0.5 * (static_cast<double>(m) * log2pi + var.array().log().sum());
    const Eigen::RowVectorXd inv = var.cwiseInverse();
    for (Eigen::Index i = 0; i < n; ++i)
      out(i, k) = norm - 0.5 * ((data.row(i) - mu).array().square() * inv.array()).sum();
  }
  return out;
}

/// E-step: fills responsibilities, returns total log-likelihood.
inline double e_step(const GmmModel& g, const Eigen::MatrixXd& data, Eigen::MatrixXd& resp) {
  resp = component_log_density(g, data);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < resp.rows(); ++i) {
    for (Eigen::Index k = 0; k < resp.cols(); ++k)
      resp(i, k) += g.weights[k] > 0 ? std::log(g.weights[k]) : -std::numeric_limits<double>::infinity();
    const double mx = resp.row(i).maxCoeff();
    const double lse = mx + std::log((resp.row(i).array() - mx).exp().sum());
    resp.row(i) = (resp.row(i).array() - lse).exp();
    ll += lse;
  }
  return ll;
}

inline void m_step(GmmModel& g, const Eigen::MatrixXd& data, const Eigen::MatrixXd& resp) {
  const Eigen::Index n = data.rows();
  const Eigen::VectorXd mass = resp.colwise().sum().transpose();
  for (Eigen::Index k = 0; k < resp.cols(); ++k) {
    if (mass[k] <= 0) continue;
    const Eigen::RowVectorXd mu = (resp.col(k).transpose() * data) / mass[k];
    Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(data.cols());
    for (Eigen::Index i = 0; i < n; ++i) var += resp(i, k) * (data.row(i) - mu).array().square().matrix();
    var /= mass[k];
    g.means.row(k) = mu;
    g.variances.row(k) = var.cwiseMax(kVarianceFloor);
    g.weights[k] = mass[k] / static_cast<double>(n);
  }
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
inline GmmModel seed_model(const Eigen::MatrixXd& data, std::size_t K, Rng& rng) {
  const Eigen::Index n = data.rows(), m = data.cols();
  GmmModel g;
  g.means.resize(static_cast<Eigen::Index>(K), m);
  const Eigen::RowVectorXd mean = data.colwise().mean();
  Eigen::RowVectorXd var = ((data.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(n)).matrix();
  var = var.cwiseMax(kVarianceFloor);
  g.variances = var.replicate(static_cast<Eigen::Index>(K), 1);
  g.weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), 1.0 / static_cast<double>(K));
  g.means.row(0) = data.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  Eigen::VectorXd d2 = (data.rowwise() - g.means.row(0)).rowwise().squaredNorm();
  for (Eigen::Index k = 1; k < static_cast<Eigen::Index>(K); ++k) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double r = rng.uniform(0.0, total), acc = 0.0;
      for (pick = 0; pick < n - 1; ++pick) {
        acc += d2[pick];
        if (acc >= r) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    g.means.row(k) = data.row(pick);
    d2 = d2.cwiseMin((data.rowwise() - g.means.row(k)).rowwise().squaredNorm());
  }
  return g;
}

/// One EM run from k-means++ seeding.
inline GmmModel em_run(const Eigen::MatrixXd& data, std::size_t K, Rng& rng, const GmmOptions& opts) {
  GmmModel g = seed_model(data, K, rng);
  Eigen::MatrixXd resp;
  double prev = -std::numeric_limits<double>::infinity();
  int reseeds = 0;
  for (int it = 0; it < opts.max_iter; ++it) {
    const double ll = e_step(g, data, resp);
    if (!g.trace.empty() && ll < prev - 1e-9 * std::max(1.0, std::abs(prev))) g.monotone = false;
    g.trace.push_back(ll);
    g.iterations = it + 1;
    if (it > 0 && ll - prev < opts.tol) {
      prev = ll;
      break;
    }
    prev = ll;

    // A component holding less than one sample's worth of responsibility
    // is re-seeded on the worst-explained point; EM restarts its trace.
    const Eigen::VectorXd mass = resp.colwise().sum().transpose();
    bool reseeded = false;
    for (Eigen::Index k = 0; k < mass.size(); ++k) {
      if (mass[k] >= 1.0) continue;
      if (++reseeds > 3) throw DegenerateComponent("GMM component collapsed repeatedly");
      Eigen::VectorXd best = component_log_density(g, data).rowwise().maxCoeff();
      Eigen::Index worst = 0;
      best.minCoeff(&worst);
      g.means.row(k) = data.row(worst);
      g.variances.row(k) = g.variances.colwise().maxCoeff();
      g.weights.setConstant(1.0 / static_cast<double>(K));
      reseeded = true;
    }
    if (reseeded) {
      g.trace.clear();
      prev = -std::numeric_limits<double>::infinity();
      continue;
    }
    m_step(g, data, resp);
  }
  g.log_likelihood = prev;
  return g;
}

}  // namespace detail

/// EM for a diagonal GMM; best of `restarts` k-means++ initializations.
inline GmmModel fit_gmm(const Eigen::MatrixXd& data, std::size_t K, std::uint64_t seed,
                        const GmmOptions& opts = {}) {
  if (K < 1 || data.rows() < static_cast<Eigen::Index>(K))
    throw ShapeMismatch("fit_gmm needs n >= K >= 1");
  GmmModel best;
  bool all_monotone = true;
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    GmmModel g = detail::em_run(data, K, rng, opts);
    all_monotone = all_monotone && g.monotone;
    if (g.log_likelihood > best.log_likelihood) best = std::move(g);
  }
  best.monotone = all_monotone;
  return best;
}

/// Bayes-rule responsibilities and argmax labels (ties -> lowest index).
inline PatternLabels assign_labels(const GmmModel& g, const Eigen::MatrixXd& data) {
  if (static_cast<std::size_t>(data.cols()) != g.dim())
    throw ShapeMismatch("assign_labels: data width does not match model");
  PatternLabels out;
  detail::e_step(g, data, out.responsibilities);
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    int arg = 0;
    for (Eigen::Index k = 1; k < out.responsibilities.cols(); ++k)
      if (out.responsibilities(i, k) > out.responsibilities(i, arg)) arg = static_cast<int>(k);
    out.hard.push_back(arg);
  }
  return out;
}

inline double gmm_bic(const GmmModel& g, std::size_t n) {
  const double p = static_cast<double>(g.k() * (2 * g.dim() + 1) - 1);
  return -2.0 * g.log_likelihood + p * std::log(static_cast<double>(n));
}

/// K in [k_min, k_max] minimizing BIC.
inline std::size_t select_k(const Eigen::MatrixXd& data, std::size_t k_min, std::size_t k_max,
                            std::uint64_t seed, const GmmOptions& opts = {}) {
  if (k_min < 1 || k_min > k_max) throw IndexOutOfRange("select_k needs 1 <= k_min <= k_max");
  std::size_t best_k = k_min;
  double best_bic = std::numeric_limits<double>::infinity();
  for (std::size_t K = k_min; K <= k_max; ++K) {
    if (data.rows() < static_cast<Eigen::Index>(K)) break;
    const double bic = gmm_bic(fit_gmm(data, K, derive_seed(seed, K), opts), static_cast<std::size_t>(data.rows()));
    if (bic < best_bic) {
      best_bic = bic;
      best_k = K;
    }
  }
  return best_k;
}

/// Accuracy after the best one-to-one relabeling of predicted clusters.
/// Exact (all permutations) up to 8 labels, greedy beyond that.
inline double aligned_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ShapeMismatch("aligned_accuracy: length mismatch");
  if (predicted.empty()) throw EmptyInput("aligned_accuracy of empty labels");
  const int kp = *std::max_element(predicted.begin(), predicted.end()) + 1;
  const int kt = *std::max_element(truth.begin(), truth.end()) + 1;
  const int k = std::max(kp, kt);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(k, k);  // predicted x truth
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (predicted[i] >= 0 && truth[i] >= 0) counts(predicted[i], truth[i]) += 1;
  double best = 0;
  if (k <= 8) {
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double s = 0;
      for (int a = 0; a < k; ++a) s += counts(a, perm[static_cast<std::size_t>(a)]);
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    Eigen::MatrixXd c = counts;
    for (int step = 0; step < k; ++step) {
      Eigen::Index r = 0, col = 0;
      const double v = c.maxCoeff(&r, &col);
      if (v <= 0) break;
      best += v;
      c.row(r).setConstant(-1);
      c.col(col).setConstant(-1);
    }
  }
  return best / static_cast<double>(truth.size());
}

inline nlohmann::json gmm_to_json(const GmmModel& g) {
  auto rows = [](const Eigen::MatrixXd& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r;
      for (Eigen::Index k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
      a.push_back(r);
    }
    return a;
  };
  std::vector<double> w(g.weights.data(), g.weights.data() + g.weights.size());
  return {{"K", g.k()}, {"means", rows(g.means)}, {"variances", rows(g.variances)}, {"weights", w}};
}

inline GmmModel gmm_from_json(const nlohmann::json& j) {
  try {
    GmmModel g;
    const auto K = j.at("K").get<Eigen::Index>();
    auto mat = [K](const nlohmann::json& a) {
      const auto m = static_cast<Eigen::Index>(a.at(0).size());
      Eigen::MatrixXd out(K, m);
      for (Eigen::Index i = 0; i < K; ++i)
        for (Eigen::Index k = 0; k < m; ++k) out(i, k) = a.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
      return out;
    };
    g.means = mat(j.at("means"));
    g.variances = mat(j.at("variances"));
    auto w = j.at("weights").get<std::vector<double>>();
    g.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("gmm json: ") + e.what());
  }
}

}  // namespace miccd
