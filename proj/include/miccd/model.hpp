#pragma once

#include <cmath>
#include <concepts>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "miccd/error.hpp"
#include "miccd/graph.hpp"
#include "miccd/scm.hpp"

namespace miccd {

/// Diagonal Gaussian posterior over every node's latent noise.
struct Posterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
};

/// What the counterfactual engine needs from a model: the graph, noise
/// abduction from a full node-order sample plus its label vector, and
/// batched per-node decoding. `decode` reads the parents of j from `values`
/// (nodes x B, original units) and returns node j for each column.
template <class M>
concept CounterfactualModel = requires(const M& m, std::span<const double> x, std::span<const double> u, NodeIndex j,
                                       const Eigen::MatrixXd& values, const Eigen::RowVectorXd& z) {
  { m.graph() } -> std::convertible_to<const CausalGraph&>;
  { m.abduct(x, u) } -> std::same_as<Posterior>;
  { m.decode(j, values, z, u) } -> std::convertible_to<Eigen::RowVectorXd>;
};

/// The true mechanisms of an SCM exposed through the model interface.
/// Abduction is exact (z_j = x_j - f_j(x_pa)); `posterior_sd` adds optional
/// Gaussian uncertainty around it. Labels are ignored.
class ExactScmModel {
 public:
  explicit ExactScmModel(Scm scm, double posterior_sd = 0.0) : scm_(std::move(scm)) {
    sd_ = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(scm_.graph.node_count()), posterior_sd);
  }
  ExactScmModel(Scm scm, Eigen::VectorXd posterior_sd) : scm_(std::move(scm)), sd_(std::move(posterior_sd)) {
    if (sd_.size() != static_cast<Eigen::Index>(scm_.graph.node_count()))
      throw ShapeMismatch("posterior sd must cover every node");
  }

  const CausalGraph& graph() const { return scm_.graph; }
  const Scm& scm() const { return scm_; }

  Posterior abduct(std::span<const double> x, std::span<const double> /*u*/) const {
    if (x.size() != scm_.graph.node_count())
      throw ShapeMismatch("sample has " + std::to_string(x.size()) + " entries, expected " +
                          std::to_string(scm_.graph.node_count()));
    Posterior p{Eigen::VectorXd(sd_.size()), sd_};
    for (NodeIndex j = 0; j < scm_.graph.node_count(); ++j)
      p.mean[static_cast<Eigen::Index>(j)] = x[j] - scm_.mechanisms[j].evaluate(x);
    return p;
  }

  Eigen::RowVectorXd decode(NodeIndex j, const Eigen::MatrixXd& values, const Eigen::RowVectorXd& z,
                            std::span<const double> /*u*/) const {
    Eigen::RowVectorXd out(values.cols());
    for (Eigen::Index c = 0; c < values.cols(); ++c) out[c] = scm_.mechanisms[j].evaluate(values.col(c)) + z[c];
    return out;
  }

 private:
  Scm scm_;
  Eigen::VectorXd sd_;
};

static_assert(CounterfactualModel<ExactScmModel>);

}  // namespace miccd
