#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "miccd/error.hpp"
#include "miccd/rng.hpp"

namespace miccd::nn {

inline constexpr double kLeakySlope = 0.01;

inline double leaky_relu(double v) { return v > 0 ? v : kLeakySlope * v; }

/// Activations recorded by a batched forward pass; consumed by backward().
struct Tape {
  std::vector<Eigen::MatrixXd> inputs;  // input of each layer (post-activation of the previous one)
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
};

/// Fully connected network, leaky-ReLU hidden layers, identity output.
///
/// All parameters live in one flat vector (layer by layer: W row-major then
/// b), so optimizers and gradient checks work on a single array. Batches are
/// column-major: one sample per column.
class Mlp {
 public:
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using WeightMap = Eigen::Map<RowMajor>;
  using ConstWeightMap = Eigen::Map<const RowMajor>;

  Mlp() = default;

  explicit Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ShapeMismatch("an MLP needs at least input and output sizes");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      if (sizes_[l] == 0 || sizes_[l + 1] == 0) throw ShapeMismatch("zero-width layer");
      offsets_.push_back(total);
      total += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
    }
    params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
  }

  /// Glorot-uniform weights, zero biases.
  static Mlp glorot(std::vector<std::size_t> sizes, Rng& rng) {
    Mlp net(std::move(sizes));
    for (std::size_t l = 0; l < net.layers(); ++l) {
      const double a = std::sqrt(6.0 / static_cast<double>(net.sizes_[l] + net.sizes_[l + 1]));
      auto W = net.weight(l);
      for (Eigen::Index r = 0; r < W.rows(); ++r)
        for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = rng.uniform(-a, a);
    }
    return net;
  }

  std::size_t layers() const { return sizes_.size() - 1; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  const std::vector<std::size_t>& sizes() const { return sizes_; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  WeightMap weight(std::size_t l) {
    return {params_.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
            static_cast<Eigen::Index>(sizes_[l])};
  }
  ConstWeightMap weight(std::size_t l) const {
    return {params_.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
            static_cast<Eigen::Index>(sizes_[l])};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) {
    return {params_.data() + offsets_[l] + sizes_[l] * sizes_[l + 1], static_cast<Eigen::Index>(sizes_[l + 1])};
  }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {params_.data() + offsets_[l] + sizes_[l] * sizes_[l + 1], static_cast<Eigen::Index>(sizes_[l + 1])};
  }

  /// Batched forward pass (input: in x B). Records a tape when given one.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& input, Tape* tape = nullptr) const {
    if (static_cast<std::size_t>(input.rows()) != input_size())
      throw ShapeMismatch("mlp input has " + std::to_string(input.rows()) + " rows, expected " +
                          std::to_string(input_size()));
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    Eigen::MatrixXd h = input;
    for (std::size_t l = 0; l < layers(); ++l) {
      Eigen::MatrixXd z = weight(l) * h;
      z.colwise() += bias(l);
      if (tape) {
        tape->inputs.push_back(std::move(h));
        tape->pre.push_back(z);
      }
      if (l + 1 < layers()) z = z.unaryExpr(&leaky_relu);
      h = std::move(z);
    }
    return h;
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const {
    return forward(Eigen::MatrixXd(input)).col(0);
  }

  /// Reverse-mode pass. `adjoint` is dLoss/dOutput (out x B). Accumulates
  /// parameter gradients into `grad` (same layout as params()) and returns
  /// dLoss/dInput (in x B).
  Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& adjoint, Eigen::VectorXd& grad) const {
    if (static_cast<std::size_t>(adjoint.rows()) != output_size() || tape.pre.size() != layers())
      throw ShapeMismatch("mlp adjoint does not match output size");
    if (grad.size() != params_.size()) grad = Eigen::VectorXd::Zero(params_.size());
    Eigen::MatrixXd delta = adjoint;
    for (std::size_t l = layers(); l-- > 0;) {
      if (l + 1 < layers())
        delta.array() *= tape.pre[l].unaryExpr([](double v) { return v > 0 ? 1.0 : kLeakySlope; }).array();
      WeightMap gW{grad.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
                   static_cast<Eigen::Index>(sizes_[l])};
      Eigen::Map<Eigen::VectorXd> gb{grad.data() + offsets_[l] + sizes_[l] * sizes_[l + 1],
                                     static_cast<Eigen::Index>(sizes_[l + 1])};
      gW.noalias() += delta * tape.inputs[l].transpose();
      gb += delta.rowwise().sum();
      delta = weight(l).transpose() * delta;
    }
    return delta;
  }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Eigen::VectorXd params_;
};

/// Adaptive-moment optimizer with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  Adam(Eigen::Index size, Options opts) : opts_(opts), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}
  explicit Adam(Eigen::Index size) : Adam(size, Options{}) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeMismatch("adam: size mismatch");
    ++t_;
    m_ = opts_.beta1 * m_ + (1.0 - opts_.beta1) * grad;
    v_ = opts_.beta2 * v_ + (1.0 - opts_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    params.array() -= opts_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + opts_.eps);
  }

  std::int64_t steps() const { return t_; }
  const Options& options() const { return opts_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }

 private:
  Options opts_;
  Eigen::VectorXd m_, v_;
  std::int64_t t_ = 0;
};

inline nlohmann::json to_json(const Mlp& net) {
  std::vector<double> p(net.params().data(), net.params().data() + net.params().size());
  return {{"sizes", net.sizes()}, {"params", p}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  try {
    Mlp net(j.at("sizes").get<std::vector<std::size_t>>());
    auto p = j.at("params").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(p.size()) != net.params().size())
      throw FormatError("mlp checkpoint parameter count mismatch");
    net.params() = Eigen::Map<Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mlp json: ") + e.what());
  }
}

}  // namespace miccd::nn
