#include "oracle_cases.hpp"
#include "synthetic.hpp"
#include "qatforge/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace qatforge;

namespace {

TrainConfig small_config(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 3;
  c.batch_size = 16;
  c.seed = 4;
  c.calibration_samples = 64;
  c.histogram_every = 10;
  c.optimizer.lr_weights = 3e-3;
  return c;
}

bool same_weights(const Network& a, const Network& b) {
  for (std::size_t l = 0; l < a.parameterized_count(); ++l) {
    if (a.parameter(l).weight != b.parameter(l).weight || a.parameter(l).bias != b.parameter(l).bias) return false;
  }
  return true;
}

}  // namespace

TEST(TrainerOracle, CostAssembly) {
  for (const auto& c : cases_for("assemble_qat_cost")) {
    const auto& a = c["args"];
    RegState reg;
    reg.omega = a[3];
    reg.alpha = a[4];
    reg.zeta = a[5];
    const auto s = a[2].get<std::vector<double>>();
    EXPECT_NEAR(assemble_qat_cost(a[0], a[1], s, reg).cost, c["expected"].get<double>(), 1e-15) << c.dump();
  }
}

TEST(TrainerOracle, Gradients) {
  for (const auto& c : cases_for("grad_weight")) {
    const auto& a = c["args"];
    EXPECT_NEAR(grad_weight(a[0], a[1], a[2], a[3], a[4], a[5]), c["expected"].get<double>(), 1e-15) << c.dump();
  }
  for (const auto& c : cases_for("grad_lambda")) {
    const auto& a = c["args"];
    EXPECT_NEAR(grad_lambda(a[0], a[1], a[2]), c["expected"].get<double>(), 1e-15) << c.dump();
  }
  for (const auto& c : cases_for("grad_omega")) {
    const auto& a = c["args"];
    EXPECT_NEAR(grad_omega(a[0], a[1], a[2]), c["expected"].get<double>(), 1e-15) << c.dump();
  }
}

TEST(TrainerOracle, InitialActivationScale) {
  for (const auto& c : cases_for("init_activation_scale")) {
    const double p99 = c["args"][0];
    const int m = c["args"][1];
    // Identity first layer: the calibration activations are the inputs themselves.
    Network net({LayerDef::fully_connected(1, 1), LayerDef::fully_connected(1, 2), LayerDef::softmax_cross_entropy()},
                {1, 1, 1});
    net.parameter(0).weight[0] = 1.0;
    net.parameter(1).weight.data() << 0.5, -0.5;
    TensorD calib({100, 1, 1, 1});
    for (Index i = 0; i < 100; ++i) calib[i] = p99 * static_cast<double>(i + 1) / 99.0;
    LayerBits bits{{2, 2}, {m}};
    const ScaleState s = init_scales(net, bits, calib);
    EXPECT_NEAR(s.activation[0], c["expected"].get<double>(), 1e-15);
    EXPECT_NEAR(s.weight[1], 0.5 / signed_code_max(2), 1e-15);
  }
}

TEST(Trainer, CostAssemblyWithPow2Terms) {
  RegState reg;
  reg.omega = 0.0;
  reg.gamma1_log = std::log(2.0);
  reg.gamma2_log = 0.0;
  reg.beta1 = 0.25;
  reg.beta2 = 0.5;
  ScaleState scales{{0.7, 0.5}, {0.375}};
  LayerBits bits{{4, 4}, {4}};
  const std::vector<double> s = {0.1};
  const CostTerms t = assemble_pow2_cost(assemble_qat_cost(1.0, 0.2, s, reg), scales, bits, reg);
  const double t_w = (0.2 * 0.2 + 0.0) / 2.0;
  const double t_a = 0.125 * 0.125;
  EXPECT_NEAR(t.cost, 1.0 + 0.2 + 0.1 + 2.0 * t_w + t_a - 0.25 * std::log(2.0), 1e-15);
}

TEST(Trainer, LargeAlphaDrivesWeightToLevel) {
  // One weight with task loss (w - 0.6)^2 on the 2-bit grid of step 0.5.
  for (double alpha : {0.5, 0.0}) {
    double w = 0.6, omega = 0.0;
    Eigen::VectorXd wv(1);
    wv[0] = w;
    Adam wopt(1);
    ScalarAdam oopt;
    const int steps = 20000;
    for (int t = 0; t < steps; ++t) {
      const double lambda = alpha > 0.0 ? std::exp(omega) : 0.0;
      const double e = wv[0] - quantize_signed(wv[0], 0.5, 2);
      Eigen::VectorXd g(1);
      g[0] = grad_weight(wv[0], 0.5, 2, lambda, 1.0, 2.0 * (wv[0] - 0.6));
      const double lr = t < steps / 2 ? 1e-2 : (t < 3 * steps / 4 ? 1e-4 : 1e-6);
      wopt.step(wv, g, lr);
      if (alpha > 0.0) {
        oopt.step(omega, grad_omega(e * e, alpha, lambda), 0.05);
        omega = std::min(omega, kMaxLogCoefficient);
      }
    }
    w = wv[0];
    if (alpha > 0.0) {
      EXPECT_NEAR(w, 0.5, 1e-4);
      EXPECT_GT(omega, 10.0);
      EXPECT_LE(omega, kMaxLogCoefficient);
    } else {
      EXPECT_NEAR(w, 0.6, 1e-4);
    }
  }
}

TEST(Trainer, PartialL2PullsOnlySmallWeightsTowardZero) {
  const double theta = 0.1;
  for (double w0 : {0.05, -0.03, 0.2, -0.5}) {
    double w = w0;
    for (int t = 0; t < 100; ++t) w -= 0.1 * partial_l2_grad(w, theta, 1.0);
    if (std::abs(w0) < theta) {
      EXPECT_LT(std::abs(w), std::abs(w0) * 1e-3);
      EXPECT_EQ(std::signbit(w), std::signbit(w0));
    } else {
      EXPECT_EQ(w, w0);
    }
  }
}

TEST(Trainer, ResolveLayerBits) {
  TrainConfig c;
  c.mode = TrainMode::qat;
  c.quant = {3, 5, false};
  auto b = resolve_layer_bits(c, 4);
  EXPECT_EQ(b.weight, (std::vector<int>{3, 3, 3, 3}));
  EXPECT_EQ(b.activation, (std::vector<int>{5, 5, 5}));
  c.skip_first_last = true;
  b = resolve_layer_bits(c, 4);
  EXPECT_EQ(b.weight, (std::vector<int>{0, 3, 3, 0}));
  EXPECT_EQ(b.activation, (std::vector<int>{5, 5, 0}));
  c.mode = TrainMode::float_baseline;
  b = resolve_layer_bits(c, 4);
  EXPECT_EQ(b.weight, (std::vector<int>{0, 0, 0, 0}));
}

TEST(Trainer, PercentileNearestRank) {
  std::vector<double> v = {5, 1, 4, 2, 3};
  EXPECT_EQ(percentile(v, 0.2), 1.0);
  EXPECT_EQ(percentile(v, 0.5), 3.0);
  EXPECT_EQ(percentile(v, 1.0), 5.0);
  EXPECT_THROW(percentile({}, 0.5), std::invalid_argument);
}

TEST(Trainer, TapMatchesManuallyQuantizedNetwork) {
  Network net = small_network(2);
  const ImageSet data = synthetic_set(8, 3);
  std::vector<Index> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const TensorD x = data.batch(idx);
  LayerBits bits{{3, 3, 3}, {4, 4}};
  const ScaleState scales = init_scales(net, bits, x);
  QuantizationTap tap(scales, bits);
  const TensorD tapped = net.forward(x, &tap).logits;

  // Rebuild by hand: quantized parameters, then quantize each hidden input.
  Network manual = net;
  for (std::size_t l = 0; l < 3; ++l) {
    auto& p = manual.parameter(l);
    p.weight.array() = quantize_signed(p.weight.array(), scales.weight[l], 3).eval();
    p.bias.array() = quantize_signed(p.bias.array(), scales.weight[l] * scales.input_scale(l), kBiasBits).eval();
  }
  class ActOnly : public ForwardTap {
   public:
    ActOnly(const ScaleState& s) : s_(s) {}
    void parameters(std::size_t, const Parameter&, TappedParameters&) const override {}
    void activation(std::size_t a, TensorD& v, TensorD&) const override {
      v.array() = quantize_unsigned(v.array(), s_.activation[a], 4).eval();
    }
    const ScaleState& s_;
  } act(scales);
  EXPECT_EQ(manual.forward(x, &act).logits, tapped);
}

TEST(Trainer, FloatRunLearnsSyntheticTask) {
  Network net = small_network(7);
  const ImageSet train_set = synthetic_set(600, 1), test_set = synthetic_set(300, 2);
  const TrainResult r = train(small_config(TrainMode::float_baseline), net, train_set, &test_set);
  EXPECT_GT(r.test_accuracy, 0.95);
  EXPECT_FALSE(r.log.iterations.empty());
}

TEST(Trainer, SameSeedSameWeights) {
  const ImageSet train_set = synthetic_set(200, 1);
  Network a = small_network(7), b = small_network(7);
  auto cfg = small_config(TrainMode::qat);
  cfg.epochs = 1;
  const TrainResult ra = train(cfg, a, train_set, nullptr);
  const TrainResult rb = train(cfg, b, train_set, nullptr);
  EXPECT_TRUE(same_weights(a, b));
  EXPECT_EQ(ra.scales.weight, rb.scales.weight);
  EXPECT_EQ(ra.reg.omega, rb.reg.omega);
}

TEST(Trainer, PruneWithZeroAlphaMatchesFloatTraining) {
  const ImageSet train_set = synthetic_set(200, 1);
  Network a = small_network(7), b = small_network(7);
  auto prune = small_config(TrainMode::prune);
  prune.epochs = 1;
  prune.alpha = 0.0;
  prune.prune_ratio = 0.5;
  auto plain = prune;
  plain.mode = TrainMode::float_baseline;
  const TrainResult ra = train(prune, a, train_set, nullptr);
  train(plain, b, train_set, nullptr);
  EXPECT_TRUE(same_weights(a, b));
  EXPECT_EQ(ra.reg.omega, 0.0);
}

TEST(Trainer, QatConvergesToLevels) {
  Network net = small_network(7);
  const ImageSet train_set = synthetic_set(600, 1), test_set = synthetic_set(300, 2);
  train(small_config(TrainMode::float_baseline), net, train_set, nullptr);
  auto cfg = small_config(TrainMode::qat);
  cfg.quant = {3, 4, false};
  cfg.epochs = 20;
  cfg.optimizer.lr_weights = 1e-3;
  cfg.optimizer.lr_omega = 1e-1;
  cfg.optimizer.decay_at = {0.6, 0.8, 0.9};
  const TrainResult r = train(cfg, net, train_set, &test_set);
  for (double e : max_quantization_error(net, r.scales, r.bits)) EXPECT_LT(e, 1e-4);
  EXPECT_GT(r.test_accuracy, 0.9);
  EXPECT_GT(r.reg.lambda(), 1.0);
}

TEST(Trainer, PruneThenQatKeepsMaskedWeightsAtZero) {
  Network net = small_network(7);
  const ImageSet train_set = synthetic_set(300, 1);
  auto pcfg = small_config(TrainMode::prune);
  pcfg.prune_ratio = 0.6;
  pcfg.epochs = 2;
  const TrainResult pr = train_prune(pcfg, net, train_set, nullptr);
  std::size_t masked = 0, total = 0;
  for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
    for (std::size_t i = 0; i < pr.mask[l].size(); ++i) {
      ++total;
      if (pr.mask[l][i]) {
        ++masked;
        EXPECT_EQ(net.parameter(l).weight[static_cast<Index>(i)], 0.0);
      }
    }
  }
  EXPECT_GE(static_cast<double>(masked), 0.6 * static_cast<double>(total) - 1.0);

  auto qcfg = small_config(TrainMode::prune_then_qat);
  qcfg.quant = {3, 4, false};
  qcfg.epochs = 2;
  const TrainResult qr = train(qcfg, net, train_set, nullptr, std::nullopt, &pr.mask);
  for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
    for (std::size_t i = 0; i < pr.mask[l].size(); ++i) {
      if (pr.mask[l][i]) {
        EXPECT_EQ(net.parameter(l).weight[static_cast<Index>(i)], 0.0);
      }
    }
  }
  EXPECT_EQ(qr.mask, pr.mask);
}

TEST(Trainer, ZeroRatioPruneLeavesMaskEmpty) {
  Network net = small_network(7);
  auto cfg = small_config(TrainMode::prune);
  cfg.epochs = 1;
  const TrainResult r = train_prune(cfg, net, synthetic_set(100, 1), nullptr);
  for (const auto& layer : r.mask) {
    for (auto m : layer) EXPECT_EQ(m, 0);
  }
}

TEST(Trainer, Pow2ModeSnapsScales) {
  Network net = small_network(7);
  const ImageSet train_set = synthetic_set(300, 1);
  train(small_config(TrainMode::float_baseline), net, train_set, nullptr);
  auto cfg = small_config(TrainMode::qat_pow2);
  cfg.quant = {4, 4, true};
  cfg.epochs = 2;
  const TrainResult r = train(cfg, net, train_set, nullptr);
  for (double d : r.scales.weight) EXPECT_TRUE(is_pow2(d)) << d;
  for (double d : r.scales.activation) EXPECT_TRUE(is_pow2(d)) << d;
  EXPECT_EQ(r.scales.input, kPow2InputScale);
}

TEST(Trainer, RejectsBadConfig) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.mode = TrainMode::prune;
  c.prune_ratio = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_train_mode("qat8"), std::invalid_argument);
  EXPECT_EQ(parse_train_mode(train_mode_name(TrainMode::prune_then_qat)), TrainMode::prune_then_qat);
}
