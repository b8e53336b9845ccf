#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "miccd/error.hpp"
#include "miccd/graph.hpp"
#include "miccd/nn.hpp"
#include "miccd/rng.hpp"
#include "miccd/scm.hpp"
#include "miccd/surrogate.hpp"
#include "miccd/vae.hpp"

namespace miccd {

/// Graph-free variant: one VAE over the whole node vector. Encoder (x, u)
/// -> q(z) with one latent per node, prior u -> p(z), decoder (z, u) -> x.
/// Without a graph there is nothing to propagate along, so a counterfactual
/// re-encodes the intervened vector and decodes it.
class FlatSurrogate {
 public:
  FlatSurrogate() = default;

  FlatSurrogate(CausalGraph graph, std::size_t label_width, Eigen::VectorXd mean, Eigen::VectorXd sd,
                TrainConfig cfg)
      : graph_(std::move(graph)), label_width_(label_width), mean_(std::move(mean)), sd_(std::move(sd)),
        config_(cfg) {
    if (label_width_ == 0) throw ShapeMismatch("label width must be positive");
    const auto N = graph_.node_count();
    if (mean_.size() != static_cast<Eigen::Index>(N) || sd_.size() != mean_.size())
      throw ShapeMismatch("standardization stats must cover every node");
    sd_ = sd_.cwiseMax(kStdFloor);
    const std::size_t hidden = config_.hidden_dim ? config_.hidden_dim : default_hidden_dim(graph_.variable_count());
    Rng rng(derive_seed(config_.seed, 0x666c6174));
    vae_.encoder = nn::Mlp::glorot(layer_sizes(N + label_width_, 2 * N, hidden, config_.depth), rng);
    vae_.prior = nn::Mlp::glorot(layer_sizes(label_width_, 2 * N, hidden, config_.depth), rng);
    vae_.decoder = nn::Mlp::glorot(layer_sizes(N + label_width_, N, hidden, config_.depth), rng);
  }

  const CausalGraph& graph() const { return graph_; }
  std::size_t label_width() const { return label_width_; }
  const TrainConfig& config() const { return config_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& sd() const { return sd_; }
  GaussianVae& vae() { return vae_; }
  const GaussianVae& vae() const { return vae_; }

  /// Standardized values (nodes x B) and labels (K x B).
  VaeBatch batch(const Eigen::MatrixXd& std_values, const Eigen::MatrixXd& labels, Eigen::MatrixXd eps) const {
    VaeBatch b;
    b.encoder_input.resize(std_values.rows() + labels.rows(), std_values.cols());
    b.encoder_input << std_values, labels;
    b.prior_input = labels;
    b.decoder_extra = labels;
    b.target = std_values;
    b.eps = std::move(eps);
    return b;
  }

  Eigen::MatrixXd standardize(const Eigen::MatrixXd& values) const {
    return ((values.colwise() - mean_).array().colwise() / sd_.array()).matrix();
  }

  /// Encode to the posterior mean and decode, in original units.
  Eigen::VectorXd reconstruct(std::span<const double> x, std::span<const double> u) const {
    check_sample(x, u);
    const Eigen::Index N = static_cast<Eigen::Index>(graph_.node_count());
    const Eigen::VectorXd lab = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
    Eigen::VectorXd in(N + lab.size());
    in << standardize(Eigen::Map<const Eigen::VectorXd>(x.data(), N)), lab;
    const Eigen::VectorXd q = vae_.encoder.forward(in);
    Eigen::VectorXd dec_in(N + lab.size());
    dec_in << q.head(N), lab;
    const Eigen::VectorXd s = vae_.decoder.forward(dec_in);
    return (s.array() * sd_.array() + mean_.array()).matrix();
  }

  /// Clamps the intervened entries, re-encodes, decodes, clamps again.
  Eigen::VectorXd counterfactual(std::span<const double> x, std::span<const double> u,
                                 const Interventions& interventions) const {
    check_sample(x, u);
    std::vector<double> xi(x.begin(), x.end());
    for (const auto& [node, value] : interventions) {
      if (node == graph_.target()) throw InterventionOnTarget("cannot intervene on the target");
      if (node >= xi.size()) throw IndexOutOfRange("intervention index out of range");
      xi[node] = value;
    }
    if (interventions.empty()) return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::VectorXd out = reconstruct(xi, u);
    for (const auto& [node, value] : interventions) out[static_cast<Eigen::Index>(node)] = value;
    return out;
  }

 private:
  void check_sample(std::span<const double> x, std::span<const double> u) const {
    if (x.size() != graph_.node_count()) throw ShapeMismatch("sample width does not match graph");
    if (u.size() != label_width_) throw ShapeMismatch("label width mismatch");
  }

  CausalGraph graph_;
  std::size_t label_width_ = 1;
  Eigen::VectorXd mean_, sd_;
  TrainConfig config_;
  GaussianVae vae_;
};

/// Same loop as train_surrogate, over the single flat network.
inline FlatSurrogate train_flat_surrogate(const LabeledDataset& data, const Eigen::MatrixXd& u, const CausalGraph& g,
                                          const TrainConfig& cfg) {
  if (static_cast<std::size_t>(data.values.cols()) != g.node_count())
    throw ShapeMismatch("dataset width does not match graph");
  if (u.rows() != data.values.rows()) throw ShapeMismatch("labels must cover every row");
  if (data.rows() == 0) throw ShapeMismatch("empty training set");
  auto [mean, sd] = detail::column_stats(data.values);
  FlatSurrogate model(g, static_cast<std::size_t>(u.cols()), mean, sd, cfg);

  const Eigen::MatrixXd s = model.standardize(data.values.transpose());
  const Eigen::MatrixXd lab = u.transpose();
  const nn::Adam::Options adam_opts{cfg.learning_rate, 0.9, 0.999, 1e-8};
  auto& vae = model.vae();
  nn::Adam enc(vae.encoder.params().size(), adam_opts), prior(vae.prior.params().size(), adam_opts),
      dec(vae.decoder.params().size(), adam_opts);

  Rng rng(derive_seed(cfg.seed, 0x747261696e));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(s.cols()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t len = std::min(bs, order.size() - start);
      const auto B = static_cast<Eigen::Index>(len);
      Eigen::MatrixXd sb(s.rows(), B), lb(lab.rows(), B), eps(s.rows(), B);
      for (std::size_t c = 0; c < len; ++c) {
        sb.col(static_cast<Eigen::Index>(c)) = s.col(order[start + c]);
        lb.col(static_cast<Eigen::Index>(c)) = lab.col(order[start + c]);
      }
      for (Eigen::Index c = 0; c < B; ++c)
        for (Eigen::Index r = 0; r < eps.rows(); ++r) eps(r, c) = rng.normal();
      VaeGrads grads;
      const VaeTerms t = vae_terms(vae, model.batch(sb, lb, std::move(eps)), cfg.obs_var, cfg.kl_weight, &grads);
      detail::require_finite(t.reconstruction_nll + t.kl, "non-finite flat-model loss at epoch " + std::to_string(epoch));
      enc.step(vae.encoder.params(), grads.encoder);
      prior.step(vae.prior.params(), grads.prior);
      dec.step(vae.decoder.params(), grads.decoder);
    }
  }
  return model;
}

inline nlohmann::json flat_surrogate_to_json(const FlatSurrogate& m) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"kind", "flat"},
          {"graph", graph_to_json(m.graph())},
          {"label_width", m.label_width()},
          {"mean", vec(m.mean())},
          {"sd", vec(m.sd())},
          {"config", m.config()},
          {"encoder", nn::to_json(m.vae().encoder)},
          {"prior", nn::to_json(m.vae().prior)},
          {"decoder", nn::to_json(m.vae().decoder)}};
}

inline FlatSurrogate flat_surrogate_from_json(const nlohmann::json& j) {
  try {
    auto vec = [](const nlohmann::json& a) {
      auto v = a.get<std::vector<double>>();
      return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    FlatSurrogate m(graph_from_json(j.at("graph")), j.at("label_width").get<std::size_t>(), vec(j.at("mean")),
                    vec(j.at("sd")), j.at("config").get<TrainConfig>());
    m.vae().encoder = nn::mlp_from_json(j.at("encoder"));
    m.vae().prior = nn::mlp_from_json(j.at("prior"));
    m.vae().decoder = nn::mlp_from_json(j.at("decoder"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("flat surrogate json: ") + e.what());
  }
}

}  // namespace miccd
