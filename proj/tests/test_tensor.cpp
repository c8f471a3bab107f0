#include "oracle_cases.hpp"
#include "qatforge/gradcheck.hpp"
#include "qatforge/network.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace qatforge;

namespace {

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double loss_of(Network& net, const TensorD& x, const std::vector<int>& labels) {
  return softmax_cross_entropy(net.forward(x).logits, labels).loss;
}

// Plain six-loop convolution for comparison.
TensorD reference_conv(const TensorD& x, const Parameter& p, const LayerDef& d) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = (h + 2 * d.padding - d.kernel) / d.stride + 1;
  const Index ow = (w + 2 * d.padding - d.kernel) / d.stride + 1;
  TensorD y({n, d.out_channels, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < d.out_channels; ++o)
      for (Index py = 0; py < oh; ++py)
        for (Index px = 0; px < ow; ++px) {
          double acc = p.bias[o];
          for (Index i = 0; i < c; ++i)
            for (Index ky = 0; ky < d.kernel; ++ky)
              for (Index kx = 0; kx < d.kernel; ++kx) {
                const Index iy = py * d.stride + ky - d.padding, ix = px * d.stride + kx - d.padding;
                if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
                acc += p.weight[((o * c + i) * d.kernel + ky) * d.kernel + kx] * x[((b * c + i) * h + iy) * w + ix];
              }
          y[((b * d.out_channels + o) * oh + py) * ow + px] = acc;
        }
  return y;
}

}  // namespace

TEST(Tensor, ShapeAndViews) {
  TensorD t({2, 3});
  EXPECT_EQ(t.size(), 6);
  t.matrix(2, 3)(1, 2) = 5.0;
  EXPECT_EQ(t[5], 5.0);
  EXPECT_THROW(t.matrix(4, 2), std::invalid_argument);
  EXPECT_THROW(TensorD({2, 0}), std::invalid_argument);
  EXPECT_EQ(t.reshaped({3, 2})[5], 5.0);
}

TEST(Network, IdentityConvPassesInput) {
  Network net({LayerDef::conv2d(1, 1, 1), LayerDef::fully_connected(4, 2), LayerDef::softmax_cross_entropy()},
              {1, 2, 2});
  net.parameter(0).weight[0] = 1.0;
  net.parameter(1).weight.data().setZero();
  std::mt19937_64 rng(3);
  const TensorD x = random_tensor({2, 1, 2, 2}, rng);
  const auto out = net.forward(x);
  ASSERT_EQ(out.activations.size(), 1u);
  EXPECT_EQ(out.activations[0].data(), x.data());
}

TEST(Network, ConvMatchesReference) {
  std::mt19937_64 rng(11);
  for (const auto& d : {LayerDef::conv2d(2, 3, 3), LayerDef::conv2d(2, 3, 3, 2, 1), LayerDef::conv2d(1, 2, 5)}) {
    const Index side = 7;
    const Index oh = (side + 2 * d.padding - d.kernel) / d.stride + 1;
    Network net({d, LayerDef::fully_connected(d.out_channels * oh * oh, 2), LayerDef::softmax_cross_entropy()},
                {d.in_channels, side, side});
    net.initialize(rng);
    // Small integers keep both sums exact.
    std::uniform_int_distribution<int> u(-4, 4);
    for (auto* t : {&net.parameter(0).weight, &net.parameter(0).bias}) {
      for (Index i = 0; i < t->size(); ++i) (*t)[i] = u(rng);
    }
    TensorD x({2, d.in_channels, side, side});
    for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
    const auto out = net.forward(x);
    EXPECT_EQ(out.activations[0].data(), reference_conv(x, net.parameter(0), d).data());
  }
}

TEST(Network, ReluAndMaxpool) {
  Network net({LayerDef::relu(), LayerDef::maxpool(2), LayerDef::fully_connected(1, 1),
               LayerDef::softmax_cross_entropy()},
              {1, 2, 2});
  net.parameter(0).weight[0] = 1.0;
  TensorD x({1, 1, 2, 2});
  x.data() << -3.0, 0.5, 2.0, -1.0;
  EXPECT_DOUBLE_EQ(net.forward(x).logits[0], 2.0);
  x.data() << -3.0, -0.5, -2.0, -1.0;
  EXPECT_DOUBLE_EQ(net.forward(x).logits[0], 0.0);
}

TEST(Network, DenseBackwardIsInputTimesUpstream) {
  Network net({LayerDef::fully_connected(3, 2), LayerDef::softmax_cross_entropy()}, {3, 1, 1});
  std::mt19937_64 rng(5);
  net.initialize(rng);
  const TensorD x = random_tensor({1, 3, 1, 1}, rng);
  net.forward(x);
  TensorD g({1, 2});
  g.data() << 0.5, -2.0;
  net.zero_grad();
  const TensorD gx = net.backward(g);
  const auto& p = net.parameter(0);
  for (Index o = 0; o < 2; ++o) {
    EXPECT_DOUBLE_EQ(p.bias.grad()[o], g[o]);
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(p.weight.grad()[o * 3 + i], g[o] * x[i], 1e-15);
  }
  for (Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(gx[i], g[0] * p.weight[i] + g[1] * p.weight[3 + i], 1e-15);
  }
}

TEST(Network, ReluBackwardMasksNegatives) {
  Network net({LayerDef::relu(), LayerDef::fully_connected(2, 1), LayerDef::softmax_cross_entropy()}, {2, 1, 1});
  net.parameter(0).weight.data() << 1.0, 1.0;
  TensorD x({1, 2, 1, 1});
  x.data() << -1.0, 2.0;
  net.forward(x);
  TensorD g({1, 1});
  g[0] = 3.0;
  net.zero_grad();
  const TensorD gx = net.backward(g);
  EXPECT_EQ(gx[0], 0.0);
  EXPECT_EQ(gx[1], 3.0);
}

TEST(Loss, SoftmaxGradientOracle) {
  for (const auto& c : cases_for("softmax_xent_grad")) {
    const auto logits = c["args"][0].get<std::vector<double>>();
    const int label = c["args"][1];
    const int batch = c["args"][2];
    const auto expected = c["expected"].get<std::vector<double>>();
    const Index k = static_cast<Index>(logits.size());
    TensorD z({batch, k});
    for (int b = 0; b < batch; ++b)
      for (Index j = 0; j < k; ++j) z[b * k + j] = logits[static_cast<std::size_t>(j)];
    const auto r = softmax_cross_entropy(z, std::vector<int>(static_cast<std::size_t>(batch), label));
    for (Index j = 0; j < k; ++j) EXPECT_NEAR(r.grad[j], expected[static_cast<std::size_t>(j)], 1e-15);
  }
}

TEST(Loss, RejectsBadLabels) {
  TensorD z({1, 3});
  EXPECT_THROW(softmax_cross_entropy(z, std::vector<int>{3}), std::invalid_argument);
  EXPECT_THROW(softmax_cross_entropy(z, std::vector<int>{0, 1}), std::invalid_argument);
}

TEST(GradCheck, FiniteDifferenceOracle) {
  for (const auto& c : cases_for("finite_difference_square")) {
    const double got = finite_difference([](double x) { return x * x; }, c["args"][0].get<double>(),
                                         c["args"][1].get<double>());
    EXPECT_NEAR(got, c["expected"].get<double>(), 1e-12);
  }
  for (const auto& c : cases_for("finite_difference_shifted")) {
    const double got = finite_difference([](double x) { return (x - 0.5) * (x - 0.5); },
                                         c["args"][0].get<double>(), c["args"][1].get<double>());
    EXPECT_NEAR(got, c["expected"].get<double>(), 1e-12);
  }
}

TEST(Network, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(21);
  Network net({LayerDef::conv2d(1, 2, 3), LayerDef::relu(), LayerDef::maxpool(2), LayerDef::fully_connected(8, 5),
               LayerDef::relu(), LayerDef::fully_connected(5, 3), LayerDef::softmax_cross_entropy()},
              {1, 6, 6});
  net.initialize(rng);
  for (auto& p : net.parameters()) p.bias = random_tensor(p.bias.shape(), rng, -0.1, 0.1);
  const TensorD x = random_tensor({3, 1, 6, 6}, rng, 0.0, 1.0);
  const std::vector<int> labels = {0, 2, 1};

  const auto out = net.forward(x);
  const auto loss = softmax_cross_entropy(out.logits, labels);
  net.zero_grad();
  net.backward(loss.grad);

  for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
    for (TensorD* t : {&net.parameter(l).weight, &net.parameter(l).bias}) {
      const Eigen::VectorXd analytic = t->grad();
      TensorD probe = *t;
      const TensorD fd = finite_difference(
          [&](TensorD& v) {
            const TensorD saved = *t;
            *t = v;
            const double f = loss_of(net, x, labels);
            *t = saved;
            return f;
          },
          probe, 1e-6);
      for (Index i = 0; i < fd.size(); ++i) {
        EXPECT_NEAR(analytic[i], fd[i], 1e-6 * std::max(1.0, std::abs(fd[i]))) << "layer " << l << " index " << i;
      }
    }
  }
}

TEST(Network, ForwardIsDeterministic) {
  std::mt19937_64 a(9), b(9);
  Network n1(lenet5_layers(), mnist_input_shape()), n2(lenet5_layers(), mnist_input_shape());
  n1.initialize(a);
  n2.initialize(b);
  std::mt19937_64 rng(1);
  const TensorD x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  EXPECT_EQ(n1.forward(x).logits, n2.forward(x).logits);
  EXPECT_EQ(n1.weight_count(), 430500);
}

TEST(Network, RejectsMissingHead) {
  EXPECT_THROW(Network({LayerDef::fully_connected(4, 2)}, {4, 1, 1}), std::invalid_argument);
}
