#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "miccd/nn.hpp"
#include "support.hpp"

using namespace miccd;
using nn::Adam;
using nn::Mlp;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = rng.normal();
  return m;
}

}  // namespace

TEST(MlpForward, ZeroParametersGiveZero) {
  const Mlp net({3, 4, 2});
  EXPECT_EQ(net.forward(Eigen::VectorXd(Eigen::VectorXd::Ones(3))), Eigen::VectorXd::Zero(2));
}

TEST(MlpForward, SingleAffineLayer) {
  Mlp net({1, 1});
  net.weight(0)(0, 0) = 2.0;
  net.bias(0)[0] = 1.0;
  EXPECT_DOUBLE_EQ(net.forward(Eigen::VectorXd(Eigen::VectorXd::Constant(1, 3.0)))[0], 7.0);
}

TEST(MlpForward, LeakyRectifier) {
  EXPECT_DOUBLE_EQ(nn::leaky_relu(-1.0), -0.01);
  EXPECT_DOUBLE_EQ(nn::leaky_relu(2.0), 2.0);
  Mlp net({1, 1, 1});
  net.weight(0)(0, 0) = 1.0;
  net.weight(1)(0, 0) = 1.0;
  EXPECT_DOUBLE_EQ(net.forward(Eigen::VectorXd(Eigen::VectorXd::Constant(1, -1.0)))[0], -0.01);
}

TEST(MlpForward, ShapeChecked) {
  const Mlp net({3, 2});
  EXPECT_THROW(net.forward(Eigen::VectorXd(Eigen::VectorXd::Ones(2))), ShapeMismatch);
  EXPECT_THROW(Mlp({3}), ShapeMismatch);
  EXPECT_THROW(Mlp({3, 0, 1}), ShapeMismatch);
}

TEST(MlpForward, PureAndGlorotBounded) {
  Rng rng(1);
  const Mlp net = Mlp::glorot({4, 50, 50, 2}, rng);
  const Eigen::VectorXd before = net.params();
  const Eigen::MatrixXd in = random_matrix(4, 5, rng);
  EXPECT_EQ(net.forward(in), net.forward(in));
  EXPECT_EQ(net.params(), before);
  const double a = std::sqrt(6.0 / 54.0);
  EXPECT_LE(net.weight(0).cwiseAbs().maxCoeff(), a);
  EXPECT_EQ(net.bias(0), Eigen::VectorXd::Zero(50));
}

TEST(MlpBackward, LinearSquaredErrorMatchesHandGradient) {
  // loss = 0.5 * sum_b (W x_b + c - t_b)^2: dW = r x^T, dc = sum r
  Rng rng(2);
  Mlp net = Mlp::glorot({3, 2}, rng);
  net.bias(0) << 0.3, -0.2;
  const Eigen::MatrixXd x = random_matrix(3, 6, rng), t = random_matrix(2, 6, rng);
  nn::Tape tape;
  const Eigen::MatrixXd r = net.forward(x, &tape) - t;
  Eigen::VectorXd grad;
  const Eigen::MatrixXd dx = net.backward(tape, r, grad);
  const Eigen::MatrixXd dW = r * x.transpose();
  const Eigen::VectorXd dc = r.rowwise().sum();
  const Mlp::ConstWeightMap gW(grad.data(), 2, 3);
  EXPECT_LT((gW - dW).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((grad.tail(2) - dc).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((dx - net.weight(0).transpose() * r).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MlpBackward, MatchesFiniteDifferences) {
  Rng rng(3);
  for (const std::vector<std::size_t>& sizes :
       std::vector<std::vector<std::size_t>>{{2, 3}, {3, 5, 2}, {4, 7, 6, 3}, {6, 50, 50, 2}}) {
    Mlp net = Mlp::glorot(sizes, rng);
    for (Eigen::Index k = 0; k < net.params().size(); ++k) net.params()[k] += 0.1 * rng.normal();
    const Eigen::MatrixXd x = random_matrix(static_cast<Eigen::Index>(sizes.front()), 4, rng);
    const Eigen::MatrixXd w = random_matrix(static_cast<Eigen::Index>(sizes.back()), 4, rng);
    auto loss = [&] { return (net.forward(x).array() * w.array()).sum() + 0.5 * net.forward(x).squaredNorm(); };
    nn::Tape tape;
    const Eigen::MatrixXd out = net.forward(x, &tape);
    Eigen::VectorXd grad;
    net.backward(tape, w + out, grad);
    EXPECT_LT(support::max_relative_error(net.params(), grad, loss, 1e-6), 1e-4);
  }
}

TEST(MlpBackward, InputGradientMatchesFiniteDifferences) {
  Rng rng(4);
  const Mlp net = Mlp::glorot({3, 8, 2}, rng);
  Eigen::VectorXd x = random_matrix(3, 1, rng).col(0);
  auto loss = [&] { return net.forward(x).sum(); };
  nn::Tape tape;
  net.forward(Eigen::MatrixXd(x), &tape);
  Eigen::VectorXd grad;
  const Eigen::VectorXd dx = net.backward(tape, Eigen::MatrixXd::Ones(2, 1), grad).col(0);
  EXPECT_LT(support::max_relative_error(x, dx, loss, 1e-6), 1e-4);
}

TEST(MlpBackward, ZeroAdjointZeroGradients) {
  Rng rng(5);
  const Mlp net = Mlp::glorot({3, 6, 2}, rng);
  nn::Tape tape;
  net.forward(random_matrix(3, 4, rng), &tape);
  Eigen::VectorXd grad;
  const Eigen::MatrixXd dx = net.backward(tape, Eigen::MatrixXd::Zero(2, 4), grad);
  EXPECT_EQ(grad, Eigen::VectorXd::Zero(net.params().size()));
  EXPECT_EQ(dx, Eigen::MatrixXd::Zero(3, 4));
  EXPECT_THROW(net.backward(tape, Eigen::MatrixXd::Zero(3, 4), grad), ShapeMismatch);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Eigen::VectorXd p = Eigen::VectorXd::LinSpaced(4, -1, 1);
  const Eigen::VectorXd before = p;
  Adam opt(4);
  opt.step(p, Eigen::VectorXd::Zero(4));
  EXPECT_EQ(p, before);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g(3);
  g << 0.5, -3.0, 0.05;
  Adam opt(3);
  opt.step(p, g);
  for (Eigen::Index k = 0; k < 3; ++k) {
    EXPECT_NEAR(std::abs(p[k]), 1e-3, 1e-3 * 1e-6);
    EXPECT_EQ(p[k] < 0, g[k] > 0);
  }
}

TEST(Adam, Deterministic) {
  Eigen::VectorXd a = Eigen::VectorXd::Ones(5), b = a;
  Adam oa(5), ob(5);
  for (int t = 0; t < 10; ++t) {
    const Eigen::VectorXd g = Eigen::VectorXd::LinSpaced(5, -2, 2) * (t + 1);
    oa.step(a, g);
    ob.step(b, g);
  }
  EXPECT_EQ(a, b);
  EXPECT_THROW(oa.step(a, Eigen::VectorXd::Zero(4)), ShapeMismatch);
}

TEST(MlpJson, RoundTrip) {
  Rng rng(6);
  const Mlp net = Mlp::glorot({3, 4, 1}, rng);
  const Mlp back = nn::mlp_from_json(nn::to_json(net));
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.params(), net.params());
  nlohmann::json bad = nn::to_json(net);
  bad["params"].erase(0);
  EXPECT_THROW(nn::mlp_from_json(bad), FormatError);
}
