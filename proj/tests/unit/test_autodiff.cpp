#include <cmath>
#include <random>

#include "beamfl/adam.hpp"
#include "beamfl/error.hpp"
#include "beamfl/loss.hpp"
#include "beamfl/network.hpp"
#include "beamfl/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace beamfl;

namespace {

Network random_net(std::mt19937_64& rng, std::size_t in, std::size_t hidden, std::size_t out) {
  const std::vector<LayerSpec> specs = {{LayerKind::kDense, in, hidden},
                                        {LayerKind::kBatchNorm, hidden, hidden},
                                        {LayerKind::kRelu, hidden, hidden},
                                        {LayerKind::kDense, hidden, out}};
  Network net = Network::build(specs, rng);
  std::uniform_real_distribution<double> u(0.5, 1.5), s(-0.5, 0.5);
  for (BNLayerState* bn : net.bn_layers()) {
    for (double& g : bn->gamma) g = u(rng);
    for (double& b : bn->beta) b = s(rng);
    for (double& m : bn->running_mean) m = s(rng);
    for (double& v : bn->running_var) v = u(rng);
  }
  return net;
}

Tensor gaussian(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> g;
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = g(rng);
  return t;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) out[r].assign(t.row(r).begin(), t.row(r).end());
  return out;
}

}  // namespace

TEST_CASE("tensor construction validates shape and values") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InputError);
  CHECK_THROWS_AS(Tensor({1, 2}, std::vector<double>{1, std::nan("")}), InputError);
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 2) == 6);
  const std::vector<std::size_t> pick = {1, 0};
  const Tensor g = t.gather_rows(pick);
  CHECK(g(0, 0) == 4);
  CHECK(g(1, 2) == 3);
}

TEST_CASE("network build rejects broken chains") {
  std::mt19937_64 rng(1);
  const std::vector<LayerSpec> bad = {{LayerKind::kDense, 3, 4}, {LayerKind::kDense, 5, 2}};
  CHECK_THROWS_AS(Network::build(bad, rng), ConfigError);
  const std::vector<LayerSpec> bn_bad = {{LayerKind::kDense, 3, 4}, {LayerKind::kBatchNorm, 4, 5}};
  CHECK_THROWS_AS(Network::build(bn_bad, rng), ConfigError);
  CHECK_THROWS_AS(Network::build(std::vector<LayerSpec>{}, rng), ConfigError);
}

TEST_CASE("forward matches a scalar re-implementation in both modes") {
  std::mt19937_64 rng(7);
  const Network net = random_net(rng, 3, 5, 4);
  const Tensor x = gaussian(rng, 6, 3);
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    const Tensor y = net.run(x, mode).output;
    const auto ref = oracle::forward(net, rows_of(x), mode == Mode::kTrain);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      for (std::size_t c = 0; c < y.cols(); ++c) CHECK(y(r, c) == doctest::Approx(ref[r][c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("dense-only network is a plain affine map") {
  std::mt19937_64 rng(2);
  const std::vector<LayerSpec> specs = {{LayerKind::kDense, 2, 2}};
  Network net = Network::build(specs, rng);
  auto& d = std::get<DenseLayer>(net.layers()[0]);
  d.weight = Tensor({2, 2}, std::vector<double>{1, 2, 3, 4});
  d.bias = {0.5, -0.5};
  const Tensor y = net.run(Tensor({1, 2}, std::vector<double>{1, 1}), Mode::kEval).output;
  CHECK(y(0, 0) == 4.5);
  CHECK(y(0, 1) == 5.5);
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    Network net = random_net(rng, 3, 4, 3);
    const Tensor x0 = gaussian(rng, 5, 3);
    const std::vector<std::size_t> labels = {0, 1, 2, 1, 0};
    const Tensor targets = one_hot(labels, 3);
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      const ForwardResult fr = net.run(x0, mode);
      const LossAndGrad lg = softmax_cross_entropy(fr.output, targets);
      const GradientSet gs = net.backward(fr.trace, lg.grad);
      auto loss_at = [&](const Network& n, const Tensor& x) {
        return softmax_cross_entropy(n.run(x, mode).output, targets).loss;
      };
      const double h = 1e-6;
      auto params = net.parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < params[k].size(); ++i) {
          const double orig = params[k][i];
          params[k][i] = orig + h;
          const double up = loss_at(net, x0);
          params[k][i] = orig - h;
          const double down = loss_at(net, x0);
          params[k][i] = orig;
          const double num = (up - down) / (2 * h);
          CHECK(std::abs(num - gs.params[k][i]) <= 1e-6 + 1e-4 * std::abs(num));
        }
      }
      Tensor x = x0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = loss_at(net, x);
        x[i] = orig - h;
        const double down = loss_at(net, x);
        x[i] = orig;
        const double num = (up - down) / (2 * h);
        CHECK(std::abs(num - gs.input[i]) <= 1e-6 + 1e-4 * std::abs(num));
      }
    }
  }
}

TEST_CASE("injected statistic gradients match differences of a stats loss") {
  // L = sum_c a_c * mean_c + b_c * var_c over the BN input batch.
  std::mt19937_64 rng(5);
  const Network net = random_net(rng, 3, 4, 2);
  const std::vector<double> a = {0.3, -1.2, 0.7, 2.0}, b = {1.1, 0.4, -0.6, 0.9};
  auto loss_at = [&](const Tensor& x) {
    const auto stats = net.run(x, Mode::kTrain).batch_stats.at(0);
    double l = 0;
    for (std::size_t c = 0; c < 4; ++c) l += a[c] * stats.mean[c] + b[c] * stats.var[c];
    return l;
  };
  Tensor x = gaussian(rng, 6, 3);
  const ForwardResult fr = net.run(x, Mode::kTrain);
  const std::vector<StatGrad> sg = {StatGrad{a, b}};
  const GradientSet gs = net.backward(fr.trace, Tensor::matrix(6, 2), sg);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i], h = 1e-6;
    x[i] = orig + h;
    const double up = loss_at(x);
    x[i] = orig - h;
    const double down = loss_at(x);
    x[i] = orig;
    CHECK(gs.input[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("running statistics follow the EMA rule and run() never writes") {
  std::mt19937_64 rng(3);
  Network net = random_net(rng, 2, 3, 2);
  const Network before = net;
  const Tensor x = gaussian(rng, 4, 2);
  (void)net.run(x, Mode::kTrain);
  CHECK(net == before);
  const ForwardResult fr = net.forward(x, Mode::kTrain);
  const BNLayerState& old_bn = *before.bn_layers()[0];
  const BNLayerState& bn = *net.bn_layers()[0];
  for (std::size_t c = 0; c < bn.width(); ++c) {
    CHECK(bn.running_mean[c] == doctest::Approx(0.9 * old_bn.running_mean[c] + 0.1 * fr.batch_stats[0].mean[c]).epsilon(1e-15));
    CHECK(bn.running_var[c] == doctest::Approx(0.9 * old_bn.running_var[c] + 0.1 * fr.batch_stats[0].var[c]).epsilon(1e-15));
  }
  Network evaluated = before;
  (void)evaluated.forward(x, Mode::kEval);
  CHECK(evaluated == before);
}

TEST_CASE("cross-entropy matches the oracle and validates targets") {
  std::mt19937_64 rng(9);
  const Tensor z = gaussian(rng, 4, 5);
  const std::vector<std::size_t> labels = {4, 0, 2, 2};
  const Tensor t = one_hot(labels, 5);
  CHECK(softmax_cross_entropy(z, t).loss == doctest::Approx(oracle::cross_entropy(rows_of(z), rows_of(t))).epsilon(1e-13));
  Tensor bad = t;
  bad(0, 0) = 0.5;
  CHECK_THROWS_AS(softmax_cross_entropy(z, bad), InputError);
  // Large logits stay finite.
  const Tensor big({1, 2}, std::vector<double>{1000.0, -1000.0});
  CHECK(std::isfinite(softmax_cross_entropy(big, one_hot(std::vector<std::size_t>{1}, 2)).loss));
}

TEST_CASE("argmax ties resolve to the lowest index") {
  const Tensor t({2, 3}, std::vector<double>{1, 3, 3, 2, 2, 2});
  const auto a = argmax_rows(t);
  CHECK(a[0] == 1);
  CHECK(a[1] == 0);
}

TEST_CASE("Adam follows the bias-corrected recurrence on f(x) = x^2") {
  std::vector<double> p = {1.5};
  AdamState adam(AdamConfig{0.01, 0.9, 0.999, 1e-8});
  double x = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 50; ++t) {
    const std::vector<std::vector<double>> g = {{2 * p[0]}};
    const std::vector<std::span<double>> ps = {std::span<double>(p)};
    adam.step(ps, g);
    const double gr = 2 * x;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(p[0] == doctest::Approx(x).epsilon(1e-14));
  }
  CHECK(adam.steps() == 50);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  std::vector<double> p = {0.25, -3.0};
  AdamState adam(AdamConfig{0.0});
  const std::vector<std::span<double>> ps = {std::span<double>(p)};
  const std::vector<std::vector<double>> g = {{1.0, -2.0}};
  adam.step(ps, g);
  sgd_step(ps, g, 0.0);
  CHECK(p == std::vector<double>{0.25, -3.0});
}
