#include "oracle_cases.hpp"
#include "qatforge/gradcheck.hpp"
#include "qatforge/regularizers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace qatforge;

namespace {

std::vector<Eigen::ArrayXd> layers_from(const nlohmann::json& j) {
  std::vector<Eigen::ArrayXd> out;
  for (const auto& layer : j) {
    const auto v = layer.get<std::vector<double>>();
    out.push_back(Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return out;
}

Eigen::ArrayXd array_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

constexpr double kTol = 1e-15;

}  // namespace

TEST(RegularizerOracle, Msqe) {
  for (const auto& c : cases_for("msqe_weights")) {
    const auto& a = c["args"];
    const auto layers = layers_from(a[0]);
    const auto deltas = a[1].get<std::vector<double>>();
    EXPECT_NEAR(msqe_weights(layers, deltas, a[2].get<int>()), c["expected"].get<double>(), kTol) << c.dump();
  }
  for (const auto& c : cases_for("msqe_weights_grad")) {
    const auto& a = c["args"];
    EXPECT_NEAR(msqe_weights_grad(a[0].get<double>(), a[1].get<double>(), a[2].get<int>(), a[3].get<double>()),
                c["expected"].get<double>(), kTol)
        << c.dump();
  }
  for (const auto& c : cases_for("msqe_activations")) {
    const auto& a = c["args"];
    EXPECT_NEAR(msqe_activations(array_from(a[0]), a[1].get<double>(), a[2].get<int>()),
                c["expected"].get<double>(), kTol)
        << c.dump();
  }
}

TEST(RegularizerOracle, ScaleGradients) {
  for (const auto& c : cases_for("scale_grad_weights")) {
    const auto& a = c["args"];
    EXPECT_NEAR(scale_grad_weights(array_from(a[0]), a[1].get<double>(), a[2].get<int>(), a[3].get<double>(),
                                   a[4].get<double>()),
                c["expected"].get<double>(), kTol)
        << c.dump();
  }
  for (const auto& c : cases_for("scale_grad_activations")) {
    const auto& a = c["args"];
    EXPECT_NEAR(scale_grad_activations(array_from(a[0]), a[1].get<double>(), a[2].get<int>(), a[3].get<double>()),
                c["expected"].get<double>(), kTol)
        << c.dump();
  }
}

TEST(RegularizerOracle, Pow2) {
  for (const auto& c : cases_for("pow2_penalty")) {
    const auto s = c["args"][0].get<std::vector<double>>();
    EXPECT_NEAR(pow2_penalty(s), c["expected"].get<double>(), kTol) << c.dump();
  }
  for (const auto& c : cases_for("pow2_penalty_grad")) {
    const auto& a = c["args"];
    EXPECT_NEAR(pow2_penalty_grad(a[0].get<double>(), a[1].get<double>(), a[2].get<double>()),
                c["expected"].get<double>(), kTol)
        << c.dump();
  }
}

TEST(RegularizerOracle, Pruning) {
  for (const auto& c : cases_for("prune_threshold")) {
    const auto& a = c["args"];
    const std::vector<Eigen::ArrayXd> layers = {array_from(a[0])};
    EXPECT_EQ(prune_threshold(layers, a[1].get<double>()), c["expected"].get<double>()) << c.dump();
  }
  for (const auto& c : cases_for("partial_l2")) {
    const auto& a = c["args"];
    const std::vector<Eigen::ArrayXd> layers = {array_from(a[0])};
    EXPECT_NEAR(partial_l2(layers, a[1].get<double>(), a[2].get<double>()), c["expected"].get<double>(), kTol)
        << c.dump();
  }
}

class MsqeProperty : public ::testing::TestWithParam<int> {};

TEST_P(MsqeProperty, GradientMatchesFiniteDifferenceOffBoundaries) {
  const int n = GetParam();
  std::mt19937_64 rng(100 + static_cast<unsigned>(n));
  const double delta = 0.1;
  std::uniform_real_distribution<double> u(-1.5 * std::ldexp(delta, n), 1.5 * std::ldexp(delta, n));
  const double h = 1e-7;
  int checked = 0;
  while (checked < 2000) {
    const double w = u(rng);
    bool near = false;
    for (double b : cell_boundaries(delta, n).points) near |= std::abs(w - b) < 10 * h;
    if (near) continue;
    const double fd = finite_difference(
        [&](double v) {
          const double e = v - quantize_signed(v, delta, n);
          return e * e / 7.0;
        },
        w, h);
    EXPECT_NEAR(msqe_weights_grad(w, delta, n, 7.0), fd, 1e-7 * std::max(1.0, std::abs(fd)));
    ++checked;
  }
}

TEST_P(MsqeProperty, ScaleGradientMatchesFiniteDifference) {
  const int n = GetParam();
  std::mt19937_64 rng(200 + static_cast<unsigned>(n));
  std::normal_distribution<double> g(0.0, 0.3);
  Eigen::ArrayXd w(64);
  for (auto& v : w) v = g(rng);
  const double lambda = 1.7, h = 1e-8;
  for (double delta : {0.05, 0.11, 0.37}) {
    const double fd = finite_difference([&](double d) { return lambda * msqe_sum(w, d, n) / 64.0; }, delta, h);
    EXPECT_NEAR(scale_grad_weights(w, delta, n, lambda, 64.0), fd, 1e-5 * std::max(1.0, std::abs(fd)));
    Eigen::ArrayXd a = w.abs();
    const double fda = finite_difference([&](double d) { return 0.8 * msqe_activations(a, d, n); }, delta, h);
    EXPECT_NEAR(scale_grad_activations(a, delta, n, 0.8), fda, 1e-5 * std::max(1.0, std::abs(fda)));
  }
}

TEST_P(MsqeProperty, VanishesOnGridAndIsPermutationInvariant) {
  const int n = GetParam();
  const double delta = 0.25;
  Eigen::ArrayXd on(32);
  std::mt19937_64 rng(300);
  std::uniform_int_distribution<int> k(static_cast<int>(signed_code_min(n)), static_cast<int>(signed_code_max(n)));
  for (auto& v : on) {
    do v = k(rng) * delta; while (n == 1 && v == 0.0);
  }
  const std::vector<Eigen::ArrayXd> grid = {on};
  const std::vector<double> deltas = {delta};
  EXPECT_EQ(msqe_weights(grid, deltas, n), 0.0);

  std::normal_distribution<double> g(0.0, 0.5);
  std::vector<double> values(200);
  for (auto& v : values) v = g(rng);
  const auto as_layer = [](const std::vector<double>& v) {
    return std::vector<Eigen::ArrayXd>{Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size()))};
  };
  const double before = msqe_weights(as_layer(values), deltas, n);
  std::shuffle(values.begin(), values.end(), rng);
  EXPECT_NEAR(msqe_weights(as_layer(values), deltas, n), before, 1e-15);
  EXPECT_GT(before, 0.0);
}

INSTANTIATE_TEST_SUITE_P(Bits, MsqeProperty, ::testing::Values(1, 2, 3, 4, 8));

TEST(Msqe, AveragesOverAllLayers) {
  const std::vector<Eigen::ArrayXd> layers = {Eigen::ArrayXd::Constant(3, 0.6), Eigen::ArrayXd::Constant(1, 0.0)};
  const std::vector<double> deltas = {0.5, 0.5};
  EXPECT_NEAR(msqe_weights(layers, deltas, 4), 3 * 0.01 / 4, 1e-15);
  const std::vector<double> short_deltas = {0.5};
  EXPECT_THROW(msqe_weights(layers, short_deltas, 4), std::invalid_argument);
}

TEST(Pow2, PenaltyVanishesAfterRounding) {
  std::mt19937_64 rng(400);
  std::uniform_real_distribution<double> e(-12.0, 4.0);
  std::vector<double> s(50);
  for (auto& v : s) v = std::exp2(e(rng));
  EXPECT_GT(pow2_penalty(s), 0.0);
  for (auto& v : s) v = round_pow2(v);
  EXPECT_EQ(pow2_penalty(s), 0.0);
  for (double v : s) EXPECT_EQ(pow2_penalty_grad(v, 1.0, 50.0), 0.0);
}

TEST(Pow2, GradientMatchesFiniteDifference) {
  for (double s : {0.3, 0.6, 0.8, 1.2, 2.9, 5.5}) {
    const double fd = finite_difference(
        [](double v) {
          const std::vector<double> one = {v};
          return 0.7 * pow2_penalty(one);
        },
        s, 1e-8);
    EXPECT_NEAR(pow2_penalty_grad(s, 0.7, 1.0), fd, 1e-6);
  }
}

TEST(Prune, ThresholdCoversRequestedFraction) {
  std::mt19937_64 rng(500);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Eigen::ArrayXd> layers = {Eigen::ArrayXd(300), Eigen::ArrayXd(701)};
  for (auto& l : layers)
    for (auto& v : l) v = g(rng);
  for (double r : {0.1, 0.5, 0.9, 0.99}) {
    const double theta = prune_threshold(layers, r);
    Eigen::Index at_or_below = 0, below = 0;
    for (const auto& l : layers) {
      at_or_below += (l.abs() <= theta).count();
      below += (l.abs() < theta).count();
    }
    EXPECT_GE(static_cast<double>(at_or_below), std::ceil(r * 1001 - 1e-9));
    EXPECT_LT(static_cast<double>(below), r * 1001);
  }
  EXPECT_EQ(prune_threshold(layers, 0.0), 0.0);
  EXPECT_THROW(prune_threshold(layers, 1.0), std::invalid_argument);
}

TEST(Prune, PartialL2IsMonotoneInTheta) {
  std::mt19937_64 rng(600);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Eigen::ArrayXd> layers = {Eigen::ArrayXd(500)};
  for (auto& v : layers[0]) v = g(rng);
  double prev = 0.0;
  for (double theta = 0.0; theta < 4.0; theta += 0.05) {
    const double p = partial_l2(layers, theta, 500.0);
    EXPECT_GE(p, prev);
    prev = p;
  }
  EXPECT_NEAR(prev, layers[0].square().mean(), 1e-12);
  EXPECT_EQ(partial_l2_grad(0.3, 0.2, 10.0), 0.0);
  EXPECT_NEAR(partial_l2_grad(0.1, 0.2, 10.0), 0.02, 1e-16);
}
