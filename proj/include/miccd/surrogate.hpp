#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/error.hpp"
#include "miccd/graph.hpp"
#include "miccd/model.hpp"
#include "miccd/nn.hpp"
#include "miccd/rng.hpp"
#include "miccd/scm.hpp"
#include "miccd/vae.hpp"

namespace miccd {

inline constexpr double kStdFloor = 1e-8;

/// Hidden width used when TrainConfig::hidden_dim is 0: 50 up to five
/// variables, 30 above.
inline std::size_t default_hidden_dim(std::size_t variables) { return variables <= 5 ? 50 : 30; }

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::size_t hidden_dim = 0;  // 0 = default_hidden_dim(d)
  std::size_t depth = 3;
  double learning_rate = 1e-3;
  double kl_weight = 1.0;
  /// Decoder observation variance, in standardized units.
  double obs_var = 0.01;
  std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, batch_size, epochs, hidden_dim, depth, learning_rate,
                                   kl_weight, obs_var, seed)

/// Per-node networks: encoder (x_pa, x_j, u) -> q(z_j), prior u -> p(z_j),
/// decoder (z_j, x_pa, u) -> x_j. All inputs standardized.
struct NodeModel {
  NodeIndex node = 0;
  NodeSet parents;
  GaussianVae vae;
};

struct TrainReport {
  double initial_elbo = 0.0;          // mean per-sample ELBO before training
  std::vector<double> epoch_elbo;     // after each epoch
};

/// Graph-structured variational surrogate of the SCM.
class SurrogateModel {
 public:
  SurrogateModel() = default;

  /// Freshly initialized (untrained) model.
  SurrogateModel(CausalGraph graph, std::size_t label_width, Eigen::VectorXd mean, Eigen::VectorXd sd,
                 TrainConfig cfg)
      : graph_(std::move(graph)), label_width_(label_width), mean_(std::move(mean)), sd_(std::move(sd)),
        config_(cfg) {
    if (label_width_ == 0) throw ShapeMismatch("label width must be positive");
    if (mean_.size() != static_cast<Eigen::Index>(graph_.node_count()) || sd_.size() != mean_.size())
      throw ShapeMismatch("standardization stats must cover every node");
    sd_ = sd_.cwiseMax(kStdFloor);
    const std::size_t hidden = config_.hidden_dim ? config_.hidden_dim : default_hidden_dim(graph_.variable_count());
    Rng rng(derive_seed(config_.seed, 0x696e6974));
    for (NodeIndex j = 0; j < graph_.node_count(); ++j) {
      NodeModel m;
      m.node = j;
      m.parents = graph_.parents(j);
      const std::size_t pa = m.parents.size(), K = label_width_;
      m.vae.encoder = nn::Mlp::glorot(layer_sizes(pa + 1 + K, 2, hidden, config_.depth), rng);
      m.vae.prior = nn::Mlp::glorot(layer_sizes(K, 2, hidden, config_.depth), rng);
      m.vae.decoder = nn::Mlp::glorot(layer_sizes(1 + pa + K, 1, hidden, config_.depth), rng);
      nodes_.push_back(std::move(m));
    }
  }

  const CausalGraph& graph() const { return graph_; }
  std::size_t label_width() const { return label_width_; }
  const TrainConfig& config() const { return config_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& sd() const { return sd_; }
  std::vector<NodeModel>& nodes() { return nodes_; }
  const std::vector<NodeModel>& nodes() const { return nodes_; }

  /// Inputs for node j built from standardized values (nodes x B) and labels
  /// (K x B).
  VaeBatch node_batch(NodeIndex j, const Eigen::MatrixXd& std_values, const Eigen::MatrixXd& labels,
                      Eigen::MatrixXd eps) const {
    const auto& pa = nodes_[j].parents;
    const Eigen::Index B = std_values.cols(), P = static_cast<Eigen::Index>(pa.size());
    const Eigen::Index K = static_cast<Eigen::Index>(label_width_);
    Eigen::MatrixXd parents(P, B);
    for (Eigen::Index k = 0; k < P; ++k) parents.row(k) = std_values.row(static_cast<Eigen::Index>(pa[k]));
    VaeBatch b;
    b.encoder_input.resize(P + 1 + K, B);
    b.encoder_input << parents, std_values.row(static_cast<Eigen::Index>(j)), labels;
    b.prior_input = labels;
    b.decoder_extra.resize(P + K, B);
    b.decoder_extra << parents, labels;
    b.target = std_values.row(static_cast<Eigen::Index>(j));
    b.eps = std::move(eps);
    return b;
  }

  /// Standardizes rows of original-unit values (nodes x B).
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& values) const {
    return ((values.colwise() - mean_).array().colwise() / sd_.array()).matrix();
  }

  /// Posterior mean and sd of every node's latent noise.
  Posterior abduct(std::span<const double> x, std::span<const double> u) const {
    check_sample(x, u);
    const Eigen::MatrixXd s = standardize(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())));
    const Eigen::MatrixXd lab = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
    Posterior post;
    post.mean.resize(static_cast<Eigen::Index>(graph_.node_count()));
    post.sd.resizeLike(post.mean);
    for (NodeIndex j = 0; j < graph_.node_count(); ++j) {
      const VaeBatch b = node_batch(j, s, lab, Eigen::MatrixXd::Zero(1, 1));
      const Eigen::VectorXd q = nodes_[j].vae.encoder.forward(Eigen::VectorXd(b.encoder_input.col(0)));
      post.mean[static_cast<Eigen::Index>(j)] = q[0];
      post.sd[static_cast<Eigen::Index>(j)] = std::exp(0.5 * q[1]);
    }
    return post;
  }

  /// Decodes node j for a batch: `values` holds original-unit node values
  /// (nodes x B; only j's parents are read), `z` the latent draws (1 x B).
  /// Output in original units.
  Eigen::RowVectorXd decode(NodeIndex j, const Eigen::MatrixXd& values, const Eigen::RowVectorXd& z,
                            std::span<const double> u) const {
    const auto& m = nodes_.at(j);
    const Eigen::Index B = values.cols(), P = static_cast<Eigen::Index>(m.parents.size());
    const Eigen::Index K = static_cast<Eigen::Index>(label_width_);
    if (static_cast<std::size_t>(u.size()) != label_width_) throw ShapeMismatch("label width mismatch");
    Eigen::MatrixXd in(1 + P + K, B);
    in.row(0) = z;
    for (Eigen::Index k = 0; k < P; ++k) {
      const auto p = static_cast<Eigen::Index>(m.parents[static_cast<std::size_t>(k)]);
      in.row(1 + k) = (values.row(p).array() - mean_[p]) / sd_[p];
    }
    for (Eigen::Index k = 0; k < K; ++k) in.row(1 + P + k).setConstant(u[static_cast<std::size_t>(k)]);
    const Eigen::MatrixXd out = m.vae.decoder.forward(in);
    const auto jj = static_cast<Eigen::Index>(j);
    return (out.row(0).array() * sd_[jj] + mean_[jj]).matrix();
  }

  /// Abducts the noise, then decodes every node in topological order from
  /// reconstructed (not observed) parents.
  Eigen::VectorXd reconstruct(std::span<const double> x, std::span<const double> u) const {
    const Posterior post = abduct(x, u);
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(graph_.node_count()), 1);
    for (NodeIndex j : graph_.topological_order()) {
      Eigen::RowVectorXd z(1);
      z[0] = post.mean[static_cast<Eigen::Index>(j)];
      v(static_cast<Eigen::Index>(j), 0) = decode(j, v, z, u)[0];
    }
    return v.col(0);
  }

 private:
  void check_sample(std::span<const double> x, std::span<const double> u) const {
    if (x.size() != graph_.node_count())
      throw ShapeMismatch("sample has " + std::to_string(x.size()) + " entries, expected " +
                          std::to_string(graph_.node_count()));
    if (u.size() != label_width_)
      throw ShapeMismatch("label vector has " + std::to_string(u.size()) + " entries, expected " +
                          std::to_string(label_width_));
  }

  CausalGraph graph_;
  std::size_t label_width_ = 1;
  Eigen::VectorXd mean_, sd_;
  TrainConfig config_;
  std::vector<NodeModel> nodes_;
};

static_assert(CounterfactualModel<SurrogateModel>);

/// One-hot rows (n x width) for integer labels in [0, width).
inline Eigen::MatrixXd one_hot(const std::vector<int>& labels, std::size_t width) {
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= width) throw ShapeMismatch("label out of range");
    u(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return u;
}

struct NodeElbo {
  double reconstruction = 0.0;  // mean E_q[log p(x_j | z_j, x_pa, u)]
  double kl = 0.0;              // mean KL(q || p)
};

/// Per-node ELBO terms, averaged over the rows of `values` (n x nodes,
/// original units) with labels `u` (n x K). `eps` (1 x n) fixes the
/// reparameterization draw; zero gives the posterior-mean estimate.
inline NodeElbo node_elbo(const SurrogateModel& model, NodeIndex j, const Eigen::MatrixXd& values,
                          const Eigen::MatrixXd& u, const Eigen::RowVectorXd& eps) {
  const Eigen::MatrixXd s = model.standardize(values.transpose());
  const VaeBatch b = model.node_batch(j, s, u.transpose(), eps);
  const VaeTerms t = vae_terms(model.nodes()[j].vae, b, model.config().obs_var, 1.0);
  const double n = static_cast<double>(values.rows());
  return {-t.reconstruction_nll / n, t.kl / n};
}

inline NodeElbo node_elbo(const SurrogateModel& model, NodeIndex j, const Eigen::MatrixXd& values,
                          const Eigen::MatrixXd& u) {
  return node_elbo(model, j, values, u, Eigen::RowVectorXd::Zero(values.rows()));
}

/// Mean per-sample ELBO summed over nodes, with draws from `seed`.
inline double dataset_elbo(const SurrogateModel& model, const Eigen::MatrixXd& values, const Eigen::MatrixXd& u,
                           std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  for (NodeIndex j = 0; j < model.graph().node_count(); ++j) {
    Eigen::RowVectorXd eps(values.rows());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    const NodeElbo e = node_elbo(model, j, values, u, eps);
    total += e.reconstruction - e.kl;
  }
  return total;
}

namespace detail {

inline void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NonFiniteLoss(what);
}

/// Mean and population sd per column.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> column_stats(const Eigen::MatrixXd& values) {
  const Eigen::VectorXd mean = values.colwise().mean().transpose();
  Eigen::VectorXd sd =
      ((values.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(values.rows()))
          .sqrt()
          .matrix()
          .transpose();
  return {mean, sd.cwiseMax(kStdFloor)};
}

}  // namespace detail

/// Minibatch ELBO maximization with teacher forcing: every node's networks
/// see the observed parents. `u` is n x K (one-hot pattern labels).
inline SurrogateModel train_surrogate(const LabeledDataset& data, const Eigen::MatrixXd& u, const CausalGraph& g,
                                      const TrainConfig& cfg, TrainReport* report = nullptr) {
  if (static_cast<std::size_t>(data.values.cols()) != g.node_count())
    throw ShapeMismatch("dataset width does not match graph");
  if (u.rows() != data.values.rows()) throw ShapeMismatch("labels must cover every row");
  if (data.rows() == 0) throw ShapeMismatch("empty training set");
  auto [mean, sd] = detail::column_stats(data.values);
  SurrogateModel model(g, static_cast<std::size_t>(u.cols()), mean, sd, cfg);

  const Eigen::MatrixXd s = model.standardize(data.values.transpose());  // nodes x n
  const Eigen::MatrixXd lab = u.transpose();
  const nn::Adam::Options adam_opts{cfg.learning_rate, 0.9, 0.999, 1e-8};
  struct Opt {
    nn::Adam enc, prior, dec;
  };
  std::vector<Opt> opts;
  for (const auto& m : model.nodes())
    opts.push_back({nn::Adam(m.vae.encoder.params().size(), adam_opts), nn::Adam(m.vae.prior.params().size(), adam_opts),
                    nn::Adam(m.vae.decoder.params().size(), adam_opts)});

  const std::uint64_t elbo_seed = derive_seed(cfg.seed, 0x656c626f);
  if (report) {
    report->initial_elbo = dataset_elbo(model, data.values, u, elbo_seed);
    report->epoch_elbo.clear();
  }

  Rng rng(derive_seed(cfg.seed, 0x747261696e));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(s.cols()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t len = std::min(bs, order.size() - start);
      Eigen::MatrixXd sb(s.rows(), static_cast<Eigen::Index>(len)), lb(lab.rows(), static_cast<Eigen::Index>(len));
      for (std::size_t c = 0; c < len; ++c) {
        sb.col(static_cast<Eigen::Index>(c)) = s.col(order[start + c]);
        lb.col(static_cast<Eigen::Index>(c)) = lab.col(order[start + c]);
      }
      for (NodeIndex j = 0; j < g.node_count(); ++j) {
        Eigen::MatrixXd eps(1, static_cast<Eigen::Index>(len));
        for (Eigen::Index c = 0; c < eps.cols(); ++c) eps(0, c) = rng.normal();
        auto& node = model.nodes()[j];
        VaeGrads grads;
        const VaeTerms t = vae_terms(node.vae, model.node_batch(j, sb, lb, std::move(eps)), cfg.obs_var,
                                     cfg.kl_weight, &grads);
        detail::require_finite(t.reconstruction_nll + t.kl,
                               "non-finite loss at epoch " + std::to_string(epoch) + ", node " + std::to_string(j));
        opts[j].enc.step(node.vae.encoder.params(), grads.encoder);
        opts[j].prior.step(node.vae.prior.params(), grads.prior);
        opts[j].dec.step(node.vae.decoder.params(), grads.decoder);
      }
    }
    if (report) report->epoch_elbo.push_back(dataset_elbo(model, data.values, u, elbo_seed));
  }
  return model;
}

// ------------------------------------------------------------ checkpoints

inline nlohmann::json surrogate_to_json(const SurrogateModel& m) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : m.nodes())
    nodes.push_back({{"node", n.node},
                     {"parents", n.parents},
                     {"encoder", nn::to_json(n.vae.encoder)},
                     {"prior", nn::to_json(n.vae.prior)},
                     {"decoder", nn::to_json(n.vae.decoder)}});
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"kind", "graph"},
          {"graph", graph_to_json(m.graph())},
          {"label_width", m.label_width()},
          {"mean", vec(m.mean())},
          {"sd", vec(m.sd())},
          {"config", m.config()},
          {"nodes", nodes}};
}

inline SurrogateModel surrogate_from_json(const nlohmann::json& j) {
  try {
    auto vec = [](const nlohmann::json& a) {
      auto v = a.get<std::vector<double>>();
      return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    SurrogateModel m(graph_from_json(j.at("graph")), j.at("label_width").get<std::size_t>(), vec(j.at("mean")),
                     vec(j.at("sd")), j.at("config").get<TrainConfig>());
    const auto& nodes = j.at("nodes");
    if (nodes.size() != m.nodes().size()) throw FormatError("checkpoint node count mismatch");
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto& n = m.nodes()[k];
      n.vae.encoder = nn::mlp_from_json(nodes[k].at("encoder"));
      n.vae.prior = nn::mlp_from_json(nodes[k].at("prior"));
      n.vae.decoder = nn::mlp_from_json(nodes[k].at("decoder"));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("surrogate json: ") + e.what());
  }
}

}  // namespace miccd
