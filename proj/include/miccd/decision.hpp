#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/error.hpp"
#include "miccd/graph.hpp"
#include "miccd/model.hpp"
#include "miccd/rng.hpp"
#include "miccd/scm.hpp"

namespace miccd {

// ------------------------------------------------------------------ cost

/// C(x*, x) = sum_i c_i |x*_i - x_i|^p + lambda0 * #{i : x*_i != x_i}.
/// Empty unit_costs means c_i = 1 everywhere.
struct CostModel {
  std::vector<double> unit_costs;
  int p = 2;
  double lambda0 = 0.0;

  double unit(std::size_t k) const { return unit_costs.empty() ? 1.0 : unit_costs[k]; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CostModel, unit_costs, p, lambda0)

inline double cost(const CostModel& cm, std::span<const double> x_star, std::span<const double> x) {
  if (x_star.size() != x.size())
    throw LengthMismatch("cost: x_star has " + std::to_string(x_star.size()) + " entries, x has " +
                         std::to_string(x.size()));
  if (!cm.unit_costs.empty() && cm.unit_costs.size() != x.size())
    throw LengthMismatch("cost: unit cost vector does not match the number of variables");
  double c = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(x_star[i] - x[i]);
    c += cm.unit(i) * (cm.p == 1 ? d : d * d);
    if (x_star[i] != x[i]) c += cm.lambda0;
  }
  return c;
}

// ------------------------------------------------------------- options

struct DecisionOpts {
  double iota = 0.9;
  double threshold = 0.0;  // anomaly threshold t
  std::size_t samples = 64;
  double tau = 0.0;   // 0: 0.05 * y_sd
  double y_sd = 1.0;  // scale of y, only used for the default tau
  std::size_t restarts = 8;
  int max_iter = 200;
  double step_tol = 1e-6;
  double constraint_tol = 1e-4;
  std::size_t verify_samples = 0;  // 0: 4 * samples
  std::uint64_t seed = 0;
  /// Normal-regime marginal means in feature order, used for warm starts.
  /// Empty disables warm starts.
  std::vector<double> normal_means;

  double temperature() const { return tau > 0 ? tau : 0.05 * y_sd; }
  std::size_t verification_samples() const { return verify_samples ? verify_samples : 4 * samples; }

  void validate() const {
    if (!(iota > 0.0 && iota <= 1.0)) throw ConfigInvalid("decision: iota must lie in (0, 1]");
    if (samples == 0) throw ConfigInvalid("decision: samples must be positive");
    if (!(temperature() > 0.0)) throw ConfigInvalid("decision: tau must be positive");
    if (max_iter < 0) throw ConfigInvalid("decision: max_iter must be non-negative");
  }
};

// ------------------------------------------------------- counterfactuals

/// Feature-order values of a full node-order sample.
inline std::vector<double> feature_vector(const CausalGraph& g, std::span<const double> sample) {
  if (sample.size() != g.node_count()) throw ShapeMismatch("sample width does not match graph");
  std::vector<double> out;
  for (NodeIndex v : g.variables()) out.push_back(sample[v]);
  return out;
}

/// Interventions implied by moving feature vector x to x_star.
inline Interventions interventions_between(const CausalGraph& g, std::span<const double> x,
                                           std::span<const double> x_star, double tol = kScreenTolerance) {
  const auto& vars = g.variables();
  if (x.size() != vars.size() || x_star.size() != vars.size())
    throw LengthMismatch("expected feature vectors of length " + std::to_string(vars.size()));
  Interventions iv;
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (std::abs(x_star[k] - x[k]) > tol) iv[vars[k]] = x_star[k];
  return iv;
}

namespace detail {

inline void check_interventions(const CausalGraph& g, const Interventions& iv) {
  for (const auto& [node, value] : iv) {
    if (node == g.target()) throw InterventionOnTarget("cannot intervene on the target");
    if (node >= g.node_count()) throw IndexOutOfRange("intervention index " + std::to_string(node) + " out of range");
  }
}

/// Counterfactual columns for fixed noise draws z (nodes x S).
template <CounterfactualModel M>
Eigen::MatrixXd propagate_draws(const M& model, std::span<const double> x, std::span<const double> u,
                                const Interventions& iv, const Eigen::MatrixXd& z) {
  const CausalGraph& g = model.graph();
  const Eigen::Index N = static_cast<Eigen::Index>(g.node_count());
  Eigen::MatrixXd v = Eigen::Map<const Eigen::VectorXd>(x.data(), N).replicate(1, z.cols());
  if (iv.empty()) return v;
  NodeSet roots;
  for (const auto& [node, value] : iv) {
    roots.push_back(node);
    v.row(static_cast<Eigen::Index>(node)).setConstant(value);
  }
  const NodeSet desc = g.descendants(roots);
  for (NodeIndex j : g.topological_order()) {
    if (!contains(desc, j) || iv.count(j)) continue;
    const auto jj = static_cast<Eigen::Index>(j);
    v.row(jj) = model.decode(j, v, z.row(jj), u);
  }
  return v;
}

inline double log_sigmoid(double s) { return s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s)); }

}  // namespace detail

/// Deterministic counterfactual with the posterior-mean noise: clamp the
/// intervened nodes, recompute their descendants in topological order,
/// keep everything else as observed. `x` is a full node-order sample.
template <CounterfactualModel M>
Eigen::VectorXd counterfactual(const M& model, std::span<const double> x, std::span<const double> u,
                               const Interventions& iv) {
  detail::check_interventions(model.graph(), iv);
  const Posterior post = model.abduct(x, u);
  return detail::propagate_draws(model, x, u, iv, post.mean).col(0);
}

/// Stochastic counterfactuals, one column per posterior draw.
template <CounterfactualModel M>
Eigen::MatrixXd counterfactual_samples(const M& model, std::span<const double> x, std::span<const double> u,
                                       const Interventions& iv, std::size_t samples, Rng& rng) {
  detail::check_interventions(model.graph(), iv);
  const Posterior post = model.abduct(x, u);
  Eigen::MatrixXd z(post.mean.size(), static_cast<Eigen::Index>(samples));
  for (Eigen::Index c = 0; c < z.cols(); ++c)
    for (Eigen::Index j = 0; j < z.rows(); ++j) z(j, c) = post.mean[j] + post.sd[j] * rng.normal();
  return detail::propagate_draws(model, x, u, iv, z);
}

// -------------------------------------------------------------------- PN

struct PnEstimate {
  double pn = 0.0;
  double smooth_pn = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// Fixed posterior draws for one factual sample, so every PN evaluation in
/// a solve sees the same noise.
template <CounterfactualModel M>
class PnEvaluator {
 public:
  PnEvaluator(const M& model, std::span<const double> x, std::span<const double> u, double threshold, double tau,
              std::size_t samples, std::uint64_t seed)
      : model_(&model), x_(x.begin(), x.end()), u_(u.begin(), u.end()), t_(threshold), tau_(tau) {
    const CausalGraph& g = model.graph();
    if (x.size() != g.node_count()) throw ShapeMismatch("sample width does not match graph");
    if (!(x[g.target()] > threshold))
      throw FactualNotAbnormal("factual target " + std::to_string(x[g.target()]) + " does not exceed threshold " +
                               std::to_string(threshold));
    if (samples == 0) throw ConfigInvalid("PN needs at least one sample");
    x_feat_ = feature_vector(g, x);
    const Posterior post = model.abduct(x, u);
    Rng rng(seed);
    z_.resize(post.mean.size(), static_cast<Eigen::Index>(samples));
    for (Eigen::Index c = 0; c < z_.cols(); ++c)
      for (Eigen::Index j = 0; j < z_.rows(); ++j) z_(j, c) = post.mean[j] + post.sd[j] * rng.normal();
  }

  const std::vector<double>& factual_features() const { return x_feat_; }

  /// Target value under each draw for the plan x_star (feature order).
  Eigen::RowVectorXd target_draws(std::span<const double> x_star) const {
    const CausalGraph& g = model_->graph();
    const Interventions iv = interventions_between(g, x_feat_, x_star);
    return detail::propagate_draws(*model_, x_, u_, iv, z_).row(static_cast<Eigen::Index>(g.target()));
  }

  PnEstimate operator()(std::span<const double> x_star) const {
    const Eigen::RowVectorXd y = target_draws(x_star);
    const double S = static_cast<double>(y.size());
    PnEstimate e;
    e.samples = static_cast<std::size_t>(y.size());
    double hits = 0.0, smooth = 0.0;
    for (Eigen::Index c = 0; c < y.size(); ++c) {
      if (y[c] <= t_) hits += 1.0;
      smooth += 1.0 / (1.0 + std::exp(-(t_ - y[c]) / tau_));
    }
    e.pn = hits / S;
    e.smooth_pn = smooth / S;
    e.std_error = std::sqrt(e.pn * (1.0 - e.pn) / S);
    return e;
  }

  /// log of the smoothed PN, computed without underflow far from the
  /// threshold.
  double log_smooth_pn(std::span<const double> x_star) const {
    const Eigen::RowVectorXd y = target_draws(x_star);
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> ls(static_cast<std::size_t>(y.size()));
    for (Eigen::Index c = 0; c < y.size(); ++c) {
      ls[static_cast<std::size_t>(c)] = detail::log_sigmoid((t_ - y[c]) / tau_);
      m = std::max(m, ls[static_cast<std::size_t>(c)]);
    }
    double acc = 0.0;
    for (double l : ls) acc += std::exp(l - m);
    return m + std::log(acc / static_cast<double>(ls.size()));
  }

 private:
  const M* model_;
  std::vector<double> x_, u_, x_feat_;
  double t_, tau_;
  Eigen::MatrixXd z_;
};

/// Hard Monte-Carlo PN (fraction of draws with y* <= t) and its logistic
/// relaxation. `x` is the full factual sample, `x_star` a feature vector.
template <CounterfactualModel M>
PnEstimate estimate_pn(const M& model, std::span<const double> x, std::span<const double> u,
                       std::span<const double> x_star, const DecisionOpts& opts) {
  opts.validate();
  PnEvaluator<M> ev(model, x, u, opts.threshold, opts.temperature(), opts.samples, opts.seed);
  return ev(x_star);
}

// ---------------------------------------------------------------- solver

struct StartRecord {
  int warm_node = -1;  // -1: factual start
  double start_cost = 0.0;
  double start_pn = 0.0;
  bool start_feasible = false;
  double cost = 0.0;
  double pn = 0.0;
  bool feasible = false;
  int iterations = 0;
  bool converged = false;
};

struct InterventionPlan {
  std::vector<NodeIndex> variables;  // node index of each feature position
  std::vector<double> x_star;
  std::vector<double> delta;
  NodeSet effective;
  double cost = 0.0;
  double pn = 0.0;
  double pn_stderr = 0.0;
  bool feasible = false;
  int iterations = 0;
  int restart = 0;
  bool start_point = false;  // winner is the unoptimized start itself
  std::vector<StartRecord> starts;
};

namespace detail {

struct SqpResult {
  std::vector<double> x;
  int iterations = 0;
  bool converged = false;
};

/// Sequential quadratic programming on the candidate coordinates:
///   min cost(x*)  s.t.  log(iota) - log(smooth_pn(x*)) <= 0.
/// Damped BFGS Hessian of the Lagrangian, closed-form QP for the single
/// inequality, L1 merit with Armijo backtracking, central-difference
/// constraint gradients.
template <CounterfactualModel M>
SqpResult sqp(const PnEvaluator<M>& ev, const CostModel& cm, const std::vector<std::size_t>& coords,
              std::vector<double> start, const DecisionOpts& opts) {
  const auto& x = ev.factual_features();
  const Eigen::Index n = static_cast<Eigen::Index>(coords.size());
  const double log_iota = std::log(opts.iota);
  SqpResult res;
  if (n == 0) {
    res.x = std::move(start);
    res.converged = true;
    return res;
  }

  std::vector<double> full = std::move(start);
  auto set = [&](const Eigen::VectorXd& v) {
    for (Eigen::Index k = 0; k < n; ++k) full[coords[static_cast<std::size_t>(k)]] = v[k];
  };
  auto objective = [&]() { return cost(cm, full, x); };
  auto constraint = [&]() { return log_iota - ev.log_smooth_pn(full); };
  auto objective_grad = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd gr(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const std::size_t i = coords[static_cast<std::size_t>(k)];
      const double d = v[k] - x[i];
      const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      gr[k] = cm.unit(i) * (cm.p == 1 ? s : 2.0 * d);
    }
    return gr;
  };
  auto constraint_grad = [&](Eigen::VectorXd v) {
    Eigen::VectorXd gr(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double v0 = v[k], h = 1e-6 * std::max(1.0, std::abs(v0));
      v[k] = v0 + h;
      set(v);
      const double up = constraint();
      v[k] = v0 - h;
      set(v);
      const double dn = constraint();
      v[k] = v0;
      gr[k] = (up - dn) / (2.0 * h);
    }
    set(v);
    return gr;
  };

  Eigen::VectorXd v(n);
  for (Eigen::Index k = 0; k < n; ++k) v[k] = full[coords[static_cast<std::size_t>(k)]];
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double c = cm.unit(coords[static_cast<std::size_t>(k)]);
    B(k, k) = c > 0 ? (cm.p == 1 ? c : 2.0 * c) : 1.0;
  }

  set(v);
  double f = objective(), g = constraint();
  Eigen::VectorXd gf = objective_grad(v), gg = constraint_grad(v);
  double rho = 1.0;
  for (int it = 0; it < opts.max_iter; ++it) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(B);
    const Eigen::VectorXd d0 = -ldlt.solve(gf);
    double mu = 0.0;
    Eigen::VectorXd d = d0;
    const double lin = g + gg.dot(d0);
    if (lin > 0) {
      const Eigen::VectorXd a = ldlt.solve(gg);
      const double den = gg.dot(a);
      if (den > 1e-300) {
        mu = lin / den;
        d = d0 - mu * a;
      }
    }
    rho = std::max(rho, 2.0 * mu);
    const double merit = f + rho * std::max(0.0, g);
    const double slope = gf.dot(d) - rho * std::max(0.0, g);

    double alpha = 1.0;
    bool accepted = false;
    Eigen::VectorXd v_new;
    double f_new = f, g_new = g;
    for (int ls = 0; ls < 40; ++ls, alpha *= 0.5) {
      v_new = v + alpha * d;
      set(v_new);
      f_new = objective();
      g_new = constraint();
      if (f_new + rho * std::max(0.0, g_new) <= merit + 1e-4 * alpha * std::min(slope, 0.0)) {
        accepted = true;
        break;
      }
    }
    ++res.iterations;
    if (!accepted) {
      set(v);
      res.converged = d.lpNorm<Eigen::Infinity>() < opts.step_tol && std::max(0.0, g) < opts.constraint_tol;
      break;
    }
    const Eigen::VectorXd s = v_new - v;
    const Eigen::VectorXd gf_new = objective_grad(v_new), gg_new = constraint_grad(v_new);
    const Eigen::VectorXd y = (gf_new + mu * gg_new) - (gf + mu * gg);
    const Eigen::VectorXd Bs = B * s;
    const double sBs = s.dot(Bs), sy = s.dot(y);
    if (sBs > 1e-300) {
      const double theta = sy >= 0.2 * sBs ? 1.0 : 0.8 * sBs / (sBs - sy);
      const Eigen::VectorXd r = theta * y + (1.0 - theta) * Bs;
      const double sr = s.dot(r);
      if (sr > 1e-300) B += r * r.transpose() / sr - Bs * Bs.transpose() / sBs;
    }
    v = v_new;
    f = f_new;
    g = g_new;
    gf = gf_new;
    gg = gg_new;
    if (s.lpNorm<Eigen::Infinity>() < opts.step_tol && std::max(0.0, g) < opts.constraint_tol) {
      res.converged = true;
      break;
    }
  }
  set(v);
  res.x = full;
  return res;
}

struct Candidate {
  std::vector<double> x_star;
  NodeSet effective;
  double cost = 0.0;
  PnEstimate pn;
  bool feasible = false;
};

/// Screens x_sol, resets screened-out coordinates, then moves along the
/// ray from the factual point to the smallest step whose common-draw PN
/// clears the working level. The level rises until the plan also clears
/// iota on the verification draws.
template <CounterfactualModel M>
Candidate finish(const PnEvaluator<M>& ev, const PnEvaluator<M>& verify, const CausalGraph& g, const CostModel& cm,
                 const std::vector<double>& x_sol, const DecisionOpts& opts, bool refine) {
  const auto& x = ev.factual_features();
  const auto& vars = g.variables();
  const NodeSet keep = screen_effective(g, x, x_sol);
  std::vector<double> base = x;
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (contains(keep, vars[k])) base[k] = x_sol[k];

  auto ray = [&](double a) {
    std::vector<double> p = x;
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = x[k] + a * (base[k] - x[k]);
    return p;
  };

  Candidate c;
  c.x_star = base;
  if (refine && !keep.empty()) {
    double level = opts.iota;
    for (int attempt = 0; attempt < 10; ++attempt) {
      double lo = 0.0, hi = 1.0;
      bool found = ev(ray(hi)).pn >= level;
      while (!found && hi < 8.0) {
        lo = hi;
        hi *= 1.5;
        found = ev(ray(hi)).pn >= level;
      }
      if (!found) break;
      for (int b = 0; b < 60; ++b) {
        const double mid = 0.5 * (lo + hi);
        if (ev(ray(mid)).pn >= level)
          hi = mid;
        else
          lo = mid;
      }
      c.x_star = ray(hi);
      if (verify(c.x_star).pn >= opts.iota || level >= 1.0) break;
      level = std::min(1.0, level + 0.02);
    }
  }
  c.effective = screen_effective(g, x, c.x_star);
  c.cost = cost(cm, c.x_star, x);
  c.pn = verify(c.x_star);
  c.feasible = c.pn.pn >= opts.iota;
  return c;
}

}  // namespace detail

/// Minimum-cost intervention with PN >= iota. `x` is the full factual
/// sample (node order). Starts from the factual point and from warm starts
/// that set one ancestor of the target to its normal mean (largest
/// deviations first). Only ancestors of the target are optimized.
template <CounterfactualModel M>
InterventionPlan solve_min_cost(const M& model, std::span<const double> x, std::span<const double> u,
                                const CostModel& cm, const DecisionOpts& opts) {
  opts.validate();
  const CausalGraph& g = model.graph();
  const auto& vars = g.variables();
  const PnEvaluator<M> ev(model, x, u, opts.threshold, opts.temperature(), opts.samples, derive_seed(opts.seed, 1));
  const PnEvaluator<M> verify(model, x, u, opts.threshold, opts.temperature(), opts.verification_samples(),
                              derive_seed(opts.seed, 2));
  const std::vector<double>& xf = ev.factual_features();
  if (!cm.unit_costs.empty() && cm.unit_costs.size() != xf.size())
    throw LengthMismatch("unit cost vector does not match the number of variables");

  const NodeSet anc = g.ancestors(g.target());
  std::vector<std::size_t> coords;
  for (std::size_t k = 0; k < vars.size(); ++k)
    if (contains(anc, vars[k])) coords.push_back(k);

  struct Start {
    int warm_node;
    std::vector<double> x;
  };
  std::vector<Start> starts{{-1, xf}};
  if (!opts.normal_means.empty()) {
    if (opts.normal_means.size() != xf.size()) throw LengthMismatch("normal means do not match the variables");
    std::vector<std::size_t> order = coords;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(xf[a] - opts.normal_means[a]) > std::abs(xf[b] - opts.normal_means[b]);
    });
    for (std::size_t k : order) {
      if (starts.size() >= std::max<std::size_t>(1, opts.restarts)) break;
      Start s{static_cast<int>(vars[k]), xf};
      s.x[k] = opts.normal_means[k];
      starts.push_back(std::move(s));
    }
  }

  InterventionPlan plan;
  plan.variables = vars;
  bool have = false;
  detail::Candidate best;
  auto consider = [&](const detail::Candidate& c, int restart, int iterations, bool start_point) {
    bool better;
    if (!have)
      better = true;
    else if (c.feasible != best.feasible)
      better = c.feasible;
    else if (c.feasible)
      better = c.cost < best.cost;
    else
      better = c.pn.pn > best.pn.pn || (c.pn.pn == best.pn.pn && c.cost < best.cost);
    if (better) {
      best = c;
      have = true;
      plan.restart = restart;
      plan.iterations = iterations;
      plan.start_point = start_point;
    }
  };

  for (std::size_t r = 0; r < starts.size(); ++r) {
    StartRecord rec;
    rec.warm_node = starts[r].warm_node;
    const detail::Candidate at_start = detail::finish(ev, verify, g, cm, starts[r].x, opts, false);
    rec.start_cost = at_start.cost;
    rec.start_pn = at_start.pn.pn;
    rec.start_feasible = at_start.feasible;
    consider(at_start, static_cast<int>(r), 0, true);

    const detail::SqpResult sol = detail::sqp(ev, cm, coords, starts[r].x, opts);
    const detail::Candidate c = detail::finish(ev, verify, g, cm, sol.x, opts, true);
    rec.cost = c.cost;
    rec.pn = c.pn.pn;
    rec.feasible = c.feasible;
    rec.iterations = sol.iterations;
    rec.converged = sol.converged;
    consider(c, static_cast<int>(r), sol.iterations, false);
    plan.starts.push_back(rec);
  }

  plan.x_star = best.x_star;
  plan.delta.resize(xf.size());
  for (std::size_t k = 0; k < xf.size(); ++k) plan.delta[k] = best.x_star[k] - xf[k];
  plan.effective = best.effective;
  plan.cost = best.cost;
  plan.pn = best.pn.pn;
  plan.pn_stderr = best.pn.std_error;
  plan.feasible = best.feasible;
  return plan;
}

/// Effective variables first, then the rest; each group by descending
/// c_i |delta_i|, ties by ascending node index. Returns node indices.
inline std::vector<NodeIndex> rank_variables(const InterventionPlan& plan, const CostModel& cm) {
  std::vector<std::size_t> pos(plan.variables.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  auto score = [&](std::size_t k) { return cm.unit(k) * std::abs(plan.delta[k]); };
  std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
    const bool ea = contains(plan.effective, plan.variables[a]), eb = contains(plan.effective, plan.variables[b]);
    if (ea != eb) return ea;
    const double sa = score(a), sb = score(b);
    if (sa != sb) return sa > sb;
    return plan.variables[a] < plan.variables[b];
  });
  std::vector<NodeIndex> out;
  for (std::size_t k : pos) out.push_back(plan.variables[k]);
  return out;
}

inline nlohmann::json plan_to_json(const InterventionPlan& plan, const CostModel& cm) {
  return {{"x_star", plan.x_star},   {"delta", plan.delta},         {"effective", plan.effective},
          {"cost", plan.cost},       {"pn", plan.pn},               {"pn_stderr", plan.pn_stderr},
          {"feasible", plan.feasible}, {"ranking", rank_variables(plan, cm)}};
}

}  // namespace miccd
