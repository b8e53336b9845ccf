#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "miccd/error.hpp"
#include "miccd/nn.hpp"

namespace miccd {

/// Encoder q(z|·), conditional prior p(z|·) and decoder p(x|z,·), all
/// diagonal Gaussian. The encoder and prior emit [mean; logvar] stacked.
struct GaussianVae {
  nn::Mlp encoder;
  nn::Mlp prior;
  nn::Mlp decoder;

  std::size_t latent_dim() const { return encoder.output_size() / 2; }
};

/// One minibatch, columns = samples.
struct VaeBatch {
  Eigen::MatrixXd encoder_input;  // conditioning + observed value
  Eigen::MatrixXd prior_input;    // conditioning only
  Eigen::MatrixXd decoder_extra;  // decoder input appended after z
  Eigen::MatrixXd target;         // reconstructed value(s)
  Eigen::MatrixXd eps;            // latent_dim x B standard normal draws
};

/// Batch sums of the two ELBO terms (ELBO = -(reconstruction_nll + kl)).
struct VaeTerms {
  double reconstruction_nll = 0.0;
  double kl = 0.0;
};

struct VaeGrads {
  Eigen::VectorXd encoder, prior, decoder;
};

/// KL(N(mq, e^lq) || N(mp, e^lp)) for scalars.
inline double gaussian_kl(double mq, double lq, double mp, double lp) {
  return 0.5 * (lp - lq + (std::exp(lq) + (mq - mp) * (mq - mp)) / std::exp(lp) - 1.0);
}

/// Evaluates the per-batch ELBO terms with the reparameterized sample
/// z = mean + exp(logvar/2) * eps. When `grads` is non-null it receives the
/// gradient of (reconstruction_nll + kl_weight * kl) / B.
inline VaeTerms vae_terms(const GaussianVae& vae, const VaeBatch& batch, double obs_var, double kl_weight,
                          VaeGrads* grads = nullptr) {
  const Eigen::Index L = static_cast<Eigen::Index>(vae.latent_dim());
  const Eigen::Index B = batch.target.cols();
  if (batch.eps.rows() != L || batch.eps.cols() != B) throw ShapeMismatch("vae: eps shape");

  nn::Tape enc_tape, prior_tape, dec_tape;
  const bool want = grads != nullptr;
  const Eigen::MatrixXd q = vae.encoder.forward(batch.encoder_input, want ? &enc_tape : nullptr);
  const Eigen::MatrixXd p = vae.prior.forward(batch.prior_input, want ? &prior_tape : nullptr);
  const Eigen::MatrixXd mq = q.topRows(L), lq = q.bottomRows(L);
  const Eigen::MatrixXd mp = p.topRows(L), lp = p.bottomRows(L);
  const Eigen::MatrixXd sq = (0.5 * lq.array()).exp().matrix();
  const Eigen::MatrixXd z = mq + (sq.array() * batch.eps.array()).matrix();

  Eigen::MatrixXd dec_in(L + batch.decoder_extra.rows(), B);
  dec_in << z, batch.decoder_extra;
  const Eigen::MatrixXd xhat = vae.decoder.forward(dec_in, want ? &dec_tape : nullptr);
  if (xhat.rows() != batch.target.rows()) throw ShapeMismatch("vae: decoder output does not match target");

  const Eigen::MatrixXd resid = batch.target - xhat;
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi * obs_var);
  VaeTerms terms;
  terms.reconstruction_nll =
      static_cast<double>(resid.size()) * log_norm + resid.squaredNorm() / (2.0 * obs_var);
  const Eigen::ArrayXXd var_q = lq.array().exp(), inv_var_p = (-lp.array()).exp();
  const Eigen::ArrayXXd diff = (mq - mp).array();
  terms.kl = 0.5 * (lp.array() - lq.array() + (var_q + diff.square()) * inv_var_p - 1.0).sum();

  if (grads) {
    const double inv_b = 1.0 / static_cast<double>(B);
    // reconstruction: d/dxhat of (x - xhat)^2 / (2 obs_var)
    const Eigen::MatrixXd d_xhat = -resid / obs_var * inv_b;
    grads->decoder = Eigen::VectorXd::Zero(vae.decoder.params().size());
    const Eigen::MatrixXd d_dec_in = vae.decoder.backward(dec_tape, d_xhat, grads->decoder);
    const Eigen::MatrixXd d_z = d_dec_in.topRows(L);

    const double w = kl_weight * inv_b;
    Eigen::MatrixXd d_q(2 * L, B), d_p(2 * L, B);
    d_q.topRows(L) = (d_z.array() + w * diff * inv_var_p).matrix();
    d_q.bottomRows(L) = (d_z.array() * batch.eps.array() * 0.5 * sq.array() +
                         w * 0.5 * (var_q * inv_var_p - 1.0))
                            .matrix();
    d_p.topRows(L) = (-w * diff * inv_var_p).matrix();
    d_p.bottomRows(L) = (w * 0.5 * (1.0 - (var_q + diff.square()) * inv_var_p)).matrix();

    grads->encoder = Eigen::VectorXd::Zero(vae.encoder.params().size());
    grads->prior = Eigen::VectorXd::Zero(vae.prior.params().size());
    vae.encoder.backward(enc_tape, d_q, grads->encoder);
    vae.prior.backward(prior_tape, d_p, grads->prior);
  }
  return terms;
}

/// Layer sizes for `depth` linear layers with constant hidden width.
inline std::vector<std::size_t> layer_sizes(std::size_t in, std::size_t out, std::size_t hidden, std::size_t depth) {
  std::vector<std::size_t> s{in};
  for (std::size_t l = 1; l < depth; ++l) s.push_back(hidden);
  s.push_back(out);
  return s;
}

}  // namespace miccd
