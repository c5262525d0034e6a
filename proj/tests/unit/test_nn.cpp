#include <gtest/gtest.h>

#include <cmath>

#include "aegis/loss.hpp"
#include "aegis/network.hpp"
#include "aegis/optim.hpp"
#include "unit/support.hpp"

namespace aegis {
namespace {

using nn::LayerSpec;
using nn::Tensor;
using testing::random_tensor;

// Straight-line re-evaluation of make_two_conv_net, independent of the
// library's layer kernels.
std::vector<double> oracle_two_conv(const nn::Network& net, const Tensor& x) {
  const auto conv = [](const nn::Layer& l, const std::vector<double>& in, std::size_t c_in, std::size_t h,
                       std::size_t stride, std::size_t pad, std::size_t& h_out) {
    const std::size_t k = l.spec.kernel, c_out = l.spec.out_channels;
    h_out = (h + 2 * pad - k) / stride + 1;
    std::vector<double> out(c_out * h_out * h_out);
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t y = 0; y < h_out; ++y)
        for (std::size_t xx = 0; xx < h_out; ++xx) {
          double s = l.bias[o];
          for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(h)) continue;
                s += l.weight[((o * c_in + c) * k + ky) * k + kx] * in[(c * h + iy) * h + ix];
              }
          out[(o * h_out + y) * h_out + xx] = s > 0.0 ? s : 0.0;  // fused relu
        }
    return out;
  };
  std::vector<double> a(x.values().begin(), x.values().end());
  std::size_t h = x.shape()[1], h1 = 0, h2 = 0;
  a = conv(net.layer(0), a, x.shape()[0], h, 1, 1, h1);
  a = conv(net.layer(2), a, 4, h1, 2, 0, h2);
  const nn::Layer& d = net.layer(5);
  std::vector<double> z(d.spec.out_features);
  for (std::size_t o = 0; o < z.size(); ++o) {
    double s = d.bias[o];
    for (std::size_t i = 0; i < a.size(); ++i) s += d.weight[o * a.size() + i] * a[i];
    z[o] = s;
  }
  return z;
}

TEST(Forward, ZeroWeightNetworkGivesZeroLogits) {
  nn::Network net = make_two_conv_net(2, 6, 5);
  Rng rng(1);
  const auto out = nn::forward(net, random_tensor({2, 6, 6}, rng));
  ASSERT_EQ(out.logits.size(), 5u);
  for (double v : out.logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, UnitOneByOneConvIsIdentity) {
  nn::Layer l{LayerSpec::conv2d(3, 3, 1), Tensor({3, 3, 1, 1}), Tensor({3})};
  for (std::size_t c = 0; c < 3; ++c) l.weight[c * 3 + c] = 1.0;
  Rng rng(2);
  const Tensor x = random_tensor({3, 4, 4}, rng);
  EXPECT_EQ(nn::apply_layer(l, x), x);
}

TEST(Forward, MatchesScalarLoopOracle) {
  const nn::Network net = testing::tiny_net(7, 4);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor({1, 5, 5}, rng);
    const auto z = nn::forward(net, x).logits;
    const auto want = oracle_two_conv(net, x);
    ASSERT_EQ(z.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(z[i], want[i], 1e-12);
  }
}

TEST(Forward, RecordsOneActivationPerExitPoint) {
  const nn::Network net = testing::tiny_net();
  Rng rng(4);
  const Tensor x = random_tensor({1, 5, 5}, rng);
  const auto out = nn::forward(net, x, true);
  ASSERT_EQ(out.activations.size(), net.exit_points().size());
  const auto trace = nn::forward_trace(net, x);
  for (std::size_t i = 0; i < net.exit_points().size(); ++i)
    EXPECT_EQ(out.activations[i], trace.after(net.exit_points()[i]));
}

TEST(Forward, RejectsShapeMismatch) {
  const nn::Network net = testing::tiny_net();
  EXPECT_THROW(nn::forward(net, Tensor({1, 6, 6})), std::invalid_argument);
}

TEST(Forward, DoesNotMutateNetwork) {
  const nn::Network net = testing::tiny_net();
  nn::Network copy = net;
  Rng rng(5);
  nn::forward(copy, random_tensor({1, 5, 5}, rng), true);
  for (std::size_t i = 0; i < net.size(); ++i) {
    EXPECT_EQ(copy.layer(i).weight, net.layer(i).weight);
    EXPECT_EQ(copy.layer(i).bias, net.layer(i).bias);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  EXPECT_NEAR(nn::cross_entropy(Tensor({10}), 3), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, SaturatedSoftmaxIsNearZero) {
  Tensor z({10});
  z[4] = 30.0;
  const double v = nn::cross_entropy(z, 4);
  EXPECT_GE(v, 0.0);
  EXPECT_LT(v, 1e-12);
}

TEST(CrossEntropy, MatchesLongDoubleEvaluation) {
  const Tensor z({3}, {1.0, 2.0, 0.5});
  const long double want = -std::log(std::exp(2.0L) / (std::exp(1.0L) + std::exp(2.0L) + std::exp(0.5L)));
  EXPECT_NEAR(nn::cross_entropy(z, 1), static_cast<double>(want), 1e-14);
}

TEST(GradParams, UnusedParameterHasExactlyZeroGradient) {
  const nn::Network net = testing::tiny_net();
  Rng rng(6);
  const auto xs = testing::random_inputs(4, {1, 5, 5}, rng);
  // Only logit 0 carries loss, so dense rows 1 and 2 receive no gradient.
  const nn::LossFn first_logit = [](const Tensor& z, std::size_t) {
    nn::LossValue v;
    v.value = z[0];
    v.grad = Tensor(z.shape());
    v.grad[0] = 1.0;
    return v;
  };
  const auto g = nn::grad_params(net, xs, first_logit);
  const Tensor& w = g.grads.weight[5];
  const std::size_t in = net.layer(5).spec.in_features;
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t i = 0; i < in; ++i) EXPECT_EQ(w[r * in + i], 0.0);
  EXPECT_EQ(g.grads.bias[5][1], 0.0);
}

TEST(GradParams, DenseSquaredErrorMatchesClosedForm) {
  nn::Network net({4}, {LayerSpec::dense(4, 3)});
  Rng rng(7);
  net.init_he(rng);
  const Tensor x = random_tensor({4}, rng);
  const Tensor target = random_tensor({3}, rng);
  const Tensor pred = nn::forward(net, x).logits;
  const nn::LossFn loss = [&](const Tensor& z, std::size_t) { return nn::squared_error_loss(z, target); };
  const std::vector<Tensor> xs{x};
  const auto g = nn::grad_params(net, xs, loss);
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.grads.weight[0][o * 4 + i], x[i] * (pred[o] - target[o]), 1e-14);
    EXPECT_NEAR(g.grads.bias[0][o], pred[o] - target[o], 1e-14);
  }
}

double relative_error(double a, double b) {
  const double d = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / d;
}

TEST(GradParams, AgreesWithCentralDifferencesOnTwoConvNet) {
  nn::Network net = testing::tiny_net(11);
  Rng rng(8);
  const auto xs = testing::random_inputs(3, {1, 5, 5}, rng);
  const std::vector<std::size_t> ys{0, 1, 2};
  const auto loss = nn::cross_entropy_fn(ys);
  const auto g = nn::grad_params(net, xs, loss);
  const auto mean_loss = [&](const nn::Network& n) {
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += nn::cross_entropy(nn::forward(n, xs[i]).logits, ys[i]);
    return s / static_cast<double>(xs.size());
  };
  const double h = 1e-6;  // one pre-activation sits 3e-5 from a ReLU kink
  std::size_t checked = 0;
  for (std::size_t layer : net.param_layers()) {
    for (int c = 0; c < 40; ++c) {
      Tensor& w = net.layer(layer).weight;
      const std::size_t i = static_cast<std::size_t>(rng.below(w.size()));
      const double orig = w[i];
      w[i] = orig + h;
      const double up = mean_loss(net);
      w[i] = orig - h;
      const double down = mean_loss(net);
      w[i] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_LT(relative_error(g.grads.weight[layer][i], fd), 1e-3) << "layer " << layer << " index " << i;
      ++checked;
    }
  }
  EXPECT_GE(checked, 100u);
}

TEST(GradInput, ConstantNetworkHasZeroGradient) {
  const nn::Network net = make_two_conv_net(1, 5, 3);
  Rng rng(9);
  const std::vector<std::size_t> ys{1};
  const Tensor g = nn::grad_input(net, random_tensor({1, 5, 5}, rng), nn::cross_entropy_fn(ys));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradInput, LinearLayerMatchesSoftmaxIdentity) {
  nn::Network net({5}, {LayerSpec::dense(5, 4)});
  Rng rng(10);
  net.init_he(rng);
  const Tensor x = random_tensor({5}, rng);
  const std::vector<std::size_t> ys{2};
  const Tensor g = nn::grad_input(net, x, nn::cross_entropy_fn(ys));
  const Tensor z = nn::forward(net, x).logits;
  double zmax = z[0];
  for (double v : z.values()) zmax = std::max(zmax, v);
  std::vector<double> p(4);
  double sum = 0.0;
  for (std::size_t o = 0; o < 4; ++o) sum += p[o] = std::exp(z[o] - zmax);
  for (std::size_t i = 0; i < 5; ++i) {
    double want = 0.0;
    for (std::size_t o = 0; o < 4; ++o) want += net.layer(0).weight[o * 5 + i] * (p[o] / sum - (o == 2 ? 1.0 : 0.0));
    EXPECT_NEAR(g[i], want, 1e-14);
  }
}

TEST(GradInput, AgreesWithCentralDifferences) {
  const nn::Network net = testing::tiny_net(12);
  Rng rng(11);
  Tensor x = random_tensor({1, 5, 5}, rng);
  const std::vector<std::size_t> ys{1};
  const Tensor g = nn::grad_input(net, x, nn::cross_entropy_fn(ys));
  const double h = 1e-4;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = nn::cross_entropy(nn::forward(net, x).logits, 1);
    x[i] = orig - h;
    const double down = nn::cross_entropy(nn::forward(net, x).logits, 1);
    x[i] = orig;
    EXPECT_LT(relative_error(g[i], (up - down) / (2 * h)), 1e-3) << "input " << i;
  }
}

TEST(Sgd, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> p{1.0, -2.0, 3.5};
  const std::vector<double> g(3, 0.0);
  nn::sgd_step(p, g, 0.5);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.5}));
}

TEST(Sgd, SingleStepExample) {
  std::vector<double> p{1.0};
  const std::vector<double> g{0.2};
  nn::sgd_step(p, g, 0.5);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
}

TEST(Sgd, ConvergesOnConvexQuadratic) {
  // f(p) = sum_i a_i (p_i - c_i)^2 / 2, minimum at c.
  const std::vector<double> a{1.0, 3.0, 0.5}, c{2.0, -1.0, 0.25};
  std::vector<double> p{0.0, 0.0, 0.0}, g(3);
  for (int it = 0; it < 500; ++it) {
    for (std::size_t i = 0; i < 3; ++i) g[i] = a[i] * (p[i] - c[i]);
    nn::sgd_step(p, g, 0.3);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], c[i], 1e-6);
}

TEST(Sgd, RejectsNonPositiveLearningRate) {
  std::vector<double> p{1.0};
  const std::vector<double> g{0.2};
  EXPECT_THROW(nn::sgd_step(p, g, 0.0), std::invalid_argument);
}

TEST(Training, IdenticalSeedsGiveBitwiseIdenticalParameters) {
  const auto train_once = [] {
    nn::Network net = make_two_conv_net(1, 5, 3);
    Rng rng(21);
    net.init_he(rng);
    const auto xs = testing::random_inputs(24, {1, 5, 5}, rng);
    const auto ys = testing::random_labels(24, 3, rng);
    nn::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 8;
    nn::fit(net, xs, ys, cfg, rng);
    return net;
  };
  const nn::Network a = train_once(), b = train_once();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.layer(i).weight, b.layer(i).weight);
    EXPECT_EQ(a.layer(i).bias, b.layer(i).bias);
  }
}

TEST(LayerSpec, RejectsInvalidShapes) {
  EXPECT_THROW(LayerSpec::conv2d(3, 4, 0).validate(), std::invalid_argument);
  EXPECT_THROW(LayerSpec::dense(0, 4).validate(), std::invalid_argument);
  EXPECT_THROW(nn::Network({3, 8, 8}, {LayerSpec::conv2d(3, 4, 3), LayerSpec::flatten(), LayerSpec::dense(10, 2)}),
               std::invalid_argument);
}

TEST(Network, ExitPointsMustIncrease) {
  const std::vector<LayerSpec> specs{LayerSpec::conv2d(1, 2, 3, 1, 1), LayerSpec::relu(),
                                     LayerSpec::flatten(), LayerSpec::dense(50, 2)};
  EXPECT_THROW(nn::Network({1, 5, 5}, specs, {1, 0}), std::invalid_argument);
  EXPECT_THROW(nn::Network({1, 5, 5}, specs, {7}), std::invalid_argument);
}

}  // namespace
}  // namespace aegis
