#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "miccd/error.hpp"
#include "miccd/graph.hpp"

namespace miccd {

enum class F1Mode { binary, macro };

namespace detail {

inline double f1_for(std::span<const int> pred, std::span<const int> truth, int positive) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive, t = truth[i] == positive;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  if (tp == 0) return 0.0;
  const double precision = tp / (tp + fp), recall = tp / (tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace detail

/// Binary F1 treats label 1 as positive. Macro F1 averages the per-class
/// F1 over every label seen in either vector.
inline double f1_score(std::span<const int> predicted, std::span<const int> truth, F1Mode mode = F1Mode::macro) {
  if (predicted.size() != truth.size()) throw LengthMismatch("f1: prediction and truth lengths differ");
  if (predicted.empty()) throw EmptyInput("f1 of empty label vectors");
  if (mode == F1Mode::binary) return detail::f1_for(predicted, truth, 1);
  std::set<int> classes(predicted.begin(), predicted.end());
  classes.insert(truth.begin(), truth.end());
  double acc = 0.0;
  for (int c : classes) acc += detail::f1_for(predicted, truth, c);
  return acc / static_cast<double>(classes.size());
}

inline double normalized_cost(double plan_cost, double reference_cost) {
  if (!(reference_cost > 0.0)) throw ZeroReference("normalized cost needs a positive reference cost");
  return plan_cost / reference_cost;
}

/// Binary-gain nDCG over the top k of `ranking`.
inline double ndcg_at_k(std::span<const NodeIndex> ranking, const NodeSet& relevant, std::size_t k) {
  if (k == 0) throw IndexOutOfRange("ndcg: k must be at least 1");
  if (relevant.empty()) throw NoRelevantItems("ndcg: no relevant items");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (contains(relevant, ranking[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i) ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / ideal;
}

/// Mean squared error over the population variance of `truth`.
inline double r_mse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw LengthMismatch("r_mse: prediction and truth lengths differ");
  if (truth.empty()) throw EmptyInput("r_mse of empty vectors");
  const double n = static_cast<double>(truth.size());
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double var = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    var += (truth[i] - mean) * (truth[i] - mean);
    mse += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  }
  if (!(var > 0.0)) throw ZeroVariance("r_mse: truth has zero variance");
  return mse / var;
}

inline constexpr double kZscoreStdFloor = 1e-8;

/// Positions of `sample` by descending |z-score| against normal-regime
/// statistics; ties by ascending position.
inline std::vector<std::size_t> naive_rca_rank(std::span<const double> sample, std::span<const double> mean,
                                               std::span<const double> sd) {
  if (mean.size() != sample.size() || sd.size() != sample.size())
    throw LengthMismatch("naive_rca_rank: statistics do not match the sample");
  std::vector<double> score(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i)
    score[i] = std::abs(sample[i] - mean[i]) / std::max(sd[i], kZscoreStdFloor);
  std::vector<std::size_t> order(sample.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

/// Median (mean of the middle pair for even sizes).
inline double median(std::vector<double> v) {
  if (v.empty()) throw EmptyInput("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace miccd
