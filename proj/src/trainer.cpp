#include "qatforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace qatforge {

namespace {

bool bias_quantized(const LayerBits& bits, std::size_t l) {
  return bits.quantized_weights(l) && (l == 0 || bits.quantized_activation(l - 1));
}

Eigen::ArrayXd keep_mask(const PruneMask& mask, std::size_t l, Index size) {
  Eigen::ArrayXd keep(size);
  const auto& m = mask.at(l);
  if (static_cast<Index>(m.size()) != size) throw std::invalid_argument("prune mask size mismatch");
  for (Index i = 0; i < size; ++i) keep[i] = m[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
  return keep;
}

HistogramSnapshot histogram(long iteration, std::size_t layer, const TensorD& w, double delta) {
  HistogramSnapshot h;
  h.iteration = iteration;
  h.layer = layer;
  h.delta = delta;
  h.counts.assign(kHistogramBins, 0);
  const double lo = -4.0 * delta, hi = 4.0 * delta;
  const double width = (hi - lo) / kHistogramBins;
  for (Index i = 0; i < w.size(); ++i) {
    const double v = w[i];
    if (v < lo) {
      ++h.underflow;
    } else if (v > hi) {
      ++h.overflow;
    } else {
      auto bin = static_cast<long>(std::floor((v - lo) / width));
      bin = std::clamp<long>(bin, 0, kHistogramBins - 1);
      ++h.counts[static_cast<std::size_t>(bin)];
    }
  }
  return h;
}

int argmax_row(const TensorD& logits, Index row) {
  const Index classes = logits.dim(1);
  Index best = 0;
  for (Index c = 1; c < classes; ++c) {
    if (logits[row * classes + c] > logits[row * classes + best]) best = c;
  }
  return static_cast<int>(best);
}

}  // namespace

const char* train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::float_baseline: return "float";
    case TrainMode::qat: return "qat";
    case TrainMode::qat_pow2: return "qat_pow2";
    case TrainMode::prune: return "prune";
    case TrainMode::prune_then_qat: return "prune_then_qat";
  }
  return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
  for (TrainMode m : {TrainMode::float_baseline, TrainMode::qat, TrainMode::qat_pow2, TrainMode::prune,
                      TrainMode::prune_then_qat}) {
    if (name == train_mode_name(m)) return m;
  }
  throw std::invalid_argument("unknown training mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (quantizing()) quant.validate();
  if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (epochs <= 0) throw std::invalid_argument("epoch count must be positive");
  if (alpha < 0.0 || zeta < 0.0 || beta1 < 0.0 || beta2 < 0.0) {
    throw std::invalid_argument("alpha, zeta, beta1, beta2 must be non-negative");
  }
  if ((mode == TrainMode::prune) && !(prune_ratio >= 0.0 && prune_ratio < 1.0)) {
    throw std::invalid_argument("prune ratio must be in [0, 1)");
  }
  for (double f : optimizer.decay_at) {
    if (f < 0.0 || f > 1.0) throw std::invalid_argument("decay points are fractions of training");
  }
}

LayerBits resolve_layer_bits(const TrainConfig& config, std::size_t layers) {
  LayerBits bits;
  bits.weight.assign(layers, 0);
  bits.activation.assign(layers > 0 ? layers - 1 : 0, 0);
  if (!config.quantizing()) return bits;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool edge = l == 0 || l + 1 == layers;
    bits.weight[l] = (config.skip_first_last && edge) ? 0 : config.quant.weight_bits;
  }
  if (config.quantize_activations) {
    for (std::size_t a = 0; a + 1 < layers; ++a) {
      const bool feeds_last = a + 2 == layers;
      bits.activation[a] = (config.skip_first_last && feeds_last) ? 0 : config.quant.activation_bits;
    }
  }
  return bits;
}

CostTerms assemble_qat_cost(double task_loss, double msqe, std::span<const double> activation_msqe,
                            const RegState& reg) {
  CostTerms t;
  t.task_loss = task_loss;
  t.msqe = msqe;
  t.activation_msqe.assign(activation_msqe.begin(), activation_msqe.end());
  t.log_penalty = -reg.alpha * std::log(reg.lambda());
  double s = 0.0;
  for (double v : activation_msqe) s += v;
  t.cost = task_loss + reg.lambda() * msqe + t.log_penalty + reg.zeta * s;
  return t;
}

CostTerms assemble_pow2_cost(CostTerms base, const ScaleState& scales, const LayerBits& bits,
                             const RegState& reg) {
  std::vector<double> ws, as;
  for (std::size_t l = 0; l < bits.weight.size(); ++l) {
    if (bits.quantized_weights(l)) ws.push_back(scales.weight.at(l));
  }
  for (std::size_t a = 0; a < bits.activation.size(); ++a) {
    if (bits.quantized_activation(a)) as.push_back(scales.activation.at(a));
  }
  base.pow2_weight = pow2_penalty(ws);
  base.pow2_activation = pow2_penalty(as);
  base.pow2_terms = reg.gamma1() * base.pow2_weight + reg.gamma2() * base.pow2_activation -
                    reg.beta1 * reg.gamma1_log - reg.beta2 * reg.gamma2_log;
  base.cost += base.pow2_terms;
  return base;
}

double grad_weight(double w, double delta, int bits, double lambda, double count, double task_grad) {
  return task_grad + lambda * msqe_weights_grad(w, delta, bits, count);
}

double grad_lambda(double msqe, double alpha, double lambda) { return msqe - alpha / lambda; }

double grad_omega(double msqe, double alpha, double lambda) { return lambda * msqe - alpha; }

void QuantizationTap::parameters(std::size_t index, const Parameter& raw, TappedParameters& out) const {
  const int n = bits_.weight.at(index);
  if (n > 0) {
    const double delta = scales_.weight.at(index);
    out.weight = TensorD(raw.weight.shape(), quantize_signed(raw.weight.array(), delta, n).matrix());
    out.weight_pass = TensorD(raw.weight.shape(), ste_weight_passmask(raw.weight.array(), delta, n).matrix());
    if (bias_quantized(bits_, index)) {
      const double bscale = delta * scales_.input_scale(index);
      out.bias = TensorD(raw.bias.shape(), quantize_signed(raw.bias.array(), bscale, kBiasBits).matrix());
    }
  }
  if (mask_ != nullptr) {
    const Eigen::ArrayXd keep = keep_mask(*mask_, index, raw.weight.size());
    if (out.weight.empty()) out.weight = raw.weight;
    if (out.weight_pass.empty()) out.weight_pass = TensorD(raw.weight.shape(), 1.0);
    out.weight.array() *= keep;
    out.weight_pass.array() *= keep;
  }
}

void QuantizationTap::activation(std::size_t index, TensorD& values, TensorD& pass) const {
  const int m = bits_.activation.at(index);
  if (m <= 0) return;
  const double delta = scales_.activation.at(index);
  pass = TensorD(values.shape(), ste_activation_passmask(values.array(), delta, m).matrix());
  values.array() = quantize_unsigned(values.array(), delta, m);
}

WeightMsqe weight_msqe(const Network& net, const ScaleState& scales, const LayerBits& bits) {
  WeightMsqe r;
  double sum = 0.0;
  for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
    if (!bits.quantized_weights(l)) continue;
    const Parameter& p = net.parameter(l);
    sum += msqe_sum(p.weight.array(), scales.weight[l], bits.weight[l]);
    r.count += static_cast<double>(p.weight.size());
    if (bias_quantized(bits, l)) {
      sum += msqe_sum(p.bias.array(), scales.weight[l] * scales.input_scale(l), kBiasBits);
      r.count += static_cast<double>(p.bias.size());
    }
  }
  r.value = r.count > 0 ? sum / r.count : 0.0;
  return r;
}

CostTerms cost_qat(Network& net, const TensorD& images, std::span<const int> labels, const ScaleState& scales,
                   const RegState& reg, const LayerBits& bits, bool backprop, std::vector<TensorD>* activations,
                   const PruneMask* mask) {
  for (double d : scales.weight) {
    if (!(d > 0.0)) throw std::invalid_argument("weight scales must be positive");
  }
  for (double d : scales.activation) {
    if (!(d > 0.0)) throw std::invalid_argument("activation scales must be positive");
  }
  QuantizationTap tap(scales, bits, mask);
  ForwardResult fr = net.forward(images, &tap);
  LossResult loss = softmax_cross_entropy(fr.logits, labels);
  if (backprop) net.backward(loss.grad);
  const WeightMsqe r = weight_msqe(net, scales, bits);
  std::vector<double> s;
  for (std::size_t a = 0; a < bits.activation.size(); ++a) {
    if (bits.quantized_activation(a)) {
      s.push_back(msqe_activations(fr.activations[a].array(), scales.activation[a], bits.activation[a]));
    }
  }
  CostTerms terms = assemble_qat_cost(loss.loss, r.value, s, reg);
  if (!std::isfinite(terms.cost)) {
    std::ostringstream os;
    os << "non-finite cost: E=" << terms.task_loss << " R=" << terms.msqe << " lambda=" << reg.lambda();
    throw std::runtime_error(os.str());
  }
  if (activations != nullptr) *activations = std::move(fr.activations);
  return terms;
}

CostTerms cost_pow2(Network& net, const TensorD& images, std::span<const int> labels, const ScaleState& scales,
                    const RegState& reg, const LayerBits& bits, bool backprop, std::vector<TensorD>* activations,
                    const PruneMask* mask) {
  return assemble_pow2_cost(cost_qat(net, images, labels, scales, reg, bits, backprop, activations, mask), scales,
                            bits, reg);
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("percentile must be in (0, 1]");
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
  return values[rank - 1];
}

ScaleState init_scales(Network& net, const LayerBits& bits, const TensorD& calibration, const PruneMask* mask) {
  if (calibration.empty() || calibration.dim(0) == 0) throw std::invalid_argument("calibration batch is empty");
  const std::size_t layers = net.parameterized_count();
  ScaleState s;
  s.weight.assign(layers, 1.0);
  s.activation.assign(layers - 1, 1.0);
  for (std::size_t l = 0; l < layers; ++l) {
    const int n = bits.weight.at(l);
    if (n <= 0) continue;
    std::vector<double> mags;
    const auto& w = net.parameter(l).weight.data();
    for (Index i = 0; i < w.size(); ++i) {
      if (mask != nullptr && (*mask)[l][static_cast<std::size_t>(i)]) continue;
      mags.push_back(std::abs(w[i]));
    }
    const double p99 = mags.empty() ? 0.0 : percentile(mags, 0.99);
    const double levels = n == 1 ? 1.0 : signed_code_max(n);
    s.weight[l] = p99 > 0.0 ? p99 / levels : 1e-3;
  }
  ForwardResult fr = net.forward(calibration);
  for (std::size_t a = 0; a + 1 < layers; ++a) {
    const int m = bits.activation.at(a);
    if (m <= 0) continue;
    const auto& v = fr.activations[a].data();
    const double p99 = percentile(std::vector<double>(v.data(), v.data() + v.size()), 0.99);
    s.activation[a] = p99 > 0.0 ? p99 / unsigned_code_max(m) : 1e-3;
  }
  return s;
}

std::vector<double> max_quantization_error(const Network& net, const ScaleState& scales, const LayerBits& bits) {
  std::vector<double> out(net.parameterized_count(), 0.0);
  for (std::size_t l = 0; l < out.size(); ++l) {
    if (!bits.quantized_weights(l)) continue;
    const auto w = net.parameter(l).weight.array();
    const double delta = scales.weight[l];
    out[l] = (w - quantize_signed(w, delta, bits.weight[l])).abs().maxCoeff() / delta;
  }
  return out;
}

double evaluate(Network& net, const ImageSet& data, const ScaleState* scales, const LayerBits* bits,
                const PruneMask* mask, Index batch_size) {
  if (data.count() == 0) throw std::invalid_argument("evaluation set is empty");
  std::optional<QuantizationTap> tap;
  if (scales != nullptr && bits != nullptr) tap.emplace(*scales, *bits, mask);
  Index correct = 0;
  std::vector<Index> idx;
  for (Index start = 0; start < data.count(); start += batch_size) {
    const Index end = std::min(start + batch_size, data.count());
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    ForwardResult fr = net.forward(data.batch(idx, scales != nullptr ? scales->input : kInputScale), tap ? &*tap : nullptr);
    for (Index i = 0; i < end - start; ++i) {
      if (argmax_row(fr.logits, i) == data.labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.count());
}

void apply_mask(Network& net, const PruneMask& mask) {
  if (mask.size() != net.parameterized_count()) throw std::invalid_argument("prune mask layer count mismatch");
  for (std::size_t l = 0; l < mask.size(); ++l) {
    auto& w = net.parameter(l).weight;
    w.array() *= keep_mask(mask, l, w.size());
  }
}

PruneMask zero_mask(const Network& net) {
  PruneMask m;
  for (const auto& p : net.parameters()) m.emplace_back(static_cast<std::size_t>(p.weight.size()), 0);
  return m;
}

TrainResult train(const TrainConfig& config, Network& net, const ImageSet& train_set, const ImageSet* test_set,
                  const std::optional<ScaleState>& initial_scales, const PruneMask* mask,
                  const ProgressFn& progress) {
  config.validate();
  if (train_set.count() == 0) throw std::invalid_argument("training set is empty");
  const std::size_t layers = net.parameterized_count();
  const bool quantizing = config.quantizing();
  const bool pow2 = config.mode == TrainMode::qat_pow2;
  const bool pruning = config.mode == TrainMode::prune;
  if (config.mode == TrainMode::prune_then_qat && mask == nullptr) {
    throw std::invalid_argument("prune_then_qat needs a prune mask");
  }

  TrainResult result;
  result.bits = resolve_layer_bits(config, layers);
  const LayerBits& bits = result.bits;
  result.mask = mask != nullptr ? *mask : zero_mask(net);
  const bool masked = mask != nullptr;
  if (masked) apply_mask(net, result.mask);

  std::mt19937_64 rng(config.seed);

  ScaleState& scales = result.scales;
  const double input_scale = pow2 ? kPow2InputScale : kInputScale;
  if (quantizing) {
    if (initial_scales) {
      scales = *initial_scales;
    } else {
      std::vector<Index> calib(static_cast<std::size_t>(std::min<Index>(config.calibration_samples, train_set.count())));
      std::iota(calib.begin(), calib.end(), Index{0});
      scales = init_scales(net, bits, train_set.batch(calib, input_scale), masked ? &result.mask : nullptr);
    }
    scales.input = input_scale;
  } else {
    scales.weight.assign(layers, 1.0);
    scales.activation.assign(layers - 1, 1.0);
  }

  RegState& reg = result.reg;
  reg.alpha = config.alpha;
  reg.zeta = config.zeta;
  reg.beta1 = config.beta1;
  reg.beta2 = config.beta2;
  const bool uses_lambda = (quantizing || pruning) && config.alpha > 0.0;

  std::vector<Adam> weight_opt, bias_opt;
  for (const auto& p : net.parameters()) {
    weight_opt.emplace_back(p.weight.size(), config.optimizer.adam);
    bias_opt.emplace_back(p.bias.size(), config.optimizer.adam);
  }
  std::vector<ScalarAdam> wscale_opt(layers, ScalarAdam(config.optimizer.adam));
  std::vector<ScalarAdam> ascale_opt(layers - 1, ScalarAdam(config.optimizer.adam));
  ScalarAdam omega_opt(config.optimizer.adam), gamma1_opt(config.optimizer.adam), gamma2_opt(config.optimizer.adam);
  std::vector<double> log_w(layers), log_a(layers - 1);
  for (std::size_t l = 0; l < layers; ++l) log_w[l] = std::log(scales.weight[l]);
  for (std::size_t a = 0; a + 1 < layers; ++a) log_a[a] = std::log(scales.activation[a]);

  std::vector<Eigen::ArrayXd> keep;
  if (masked) {
    for (std::size_t l = 0; l < layers; ++l) keep.push_back(keep_mask(result.mask, l, net.parameter(l).weight.size()));
  }

  Index per_epoch = (train_set.count() + config.batch_size - 1) / config.batch_size;
  if (config.max_iterations_per_epoch > 0) per_epoch = std::min<Index>(per_epoch, config.max_iterations_per_epoch);
  const long total = static_cast<long>(per_epoch) * config.epochs;
  const Index weight_total = net.weight_count();
  std::size_t quant_w_layers = 0, quant_a_layers = 0;
  for (std::size_t l = 0; l < layers; ++l) quant_w_layers += bits.quantized_weights(l) ? 1 : 0;
  for (std::size_t a = 0; a + 1 < layers; ++a) quant_a_layers += bits.quantized_activation(a) ? 1 : 0;

  std::vector<Index> order(static_cast<std::size_t>(train_set.count()));
  std::iota(order.begin(), order.end(), Index{0});
  bool frozen_scales = false;
  long iteration = 0;
  std::vector<TensorD> acts;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index b = 0; b < per_epoch; ++b, ++iteration) {
      const Index start = b * config.batch_size;
      const Index end = std::min<Index>(start + config.batch_size, train_set.count());
      std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(end - start));
      const TensorD x = train_set.batch(idx, scales.input);
      const std::vector<int> y = train_set.batch_labels(idx);

      double lr_factor = 1.0;
      for (double f : config.optimizer.decay_at) {
        if (static_cast<double>(iteration) >= f * static_cast<double>(total)) lr_factor *= config.optimizer.decay_factor;
      }
      if (pow2 && !frozen_scales && static_cast<double>(iteration) >= config.pow2_snap_at * static_cast<double>(total)) {
        for (std::size_t l = 0; l < layers; ++l) {
          if (bits.quantized_weights(l)) scales.weight[l] = round_pow2(scales.weight[l]);
        }
        for (std::size_t a = 0; a + 1 < layers; ++a) {
          if (bits.quantized_activation(a)) scales.activation[a] = round_pow2(scales.activation[a]);
        }
        frozen_scales = true;
      }

      IterationRecord rec;
      rec.iteration = iteration;
      rec.epoch = epoch;
      const double lambda = uses_lambda ? reg.lambda() : 0.0;

      if (quantizing) {
        CostTerms terms = pow2 ? cost_pow2(net, x, y, scales, reg, bits, true, &acts, masked ? &result.mask : nullptr)
                               : cost_qat(net, x, y, scales, reg, bits, true, &acts, masked ? &result.mask : nullptr);
        const WeightMsqe r = weight_msqe(net, scales, bits);
        rec.task_loss = terms.task_loss;
        rec.msqe = terms.msqe;
        rec.cost = terms.cost;
        for (double s : terms.activation_msqe) rec.activation_msqe += s;

        for (std::size_t l = 0; l < layers; ++l) {
          if (!bits.quantized_weights(l) || lambda == 0.0) continue;
          Parameter& p = net.parameter(l);
          p.weight.grad().array() += lambda * msqe_weights_grad(p.weight.array(), scales.weight[l], bits.weight[l], r.count);
          if (bias_quantized(bits, l)) {
            const double bscale = scales.weight[l] * scales.input_scale(l);
            p.bias.grad().array() += lambda * msqe_weights_grad(p.bias.array(), bscale, kBiasBits, r.count);
          }
        }
        if (!frozen_scales) {
          const double lr_s = config.optimizer.lr_scales * lr_factor;
          for (std::size_t l = 0; l < layers; ++l) {
            if (!bits.quantized_weights(l)) continue;
            double g = lambda > 0.0 ? scale_grad_weights(net.parameter(l).weight.array(), scales.weight[l],
                                                         bits.weight[l], lambda, r.count)
                                    : 0.0;
            if (pow2) g += pow2_penalty_grad(scales.weight[l], reg.gamma1(), static_cast<double>(quant_w_layers));
            wscale_opt[l].step(log_w[l], scales.weight[l] * g, lr_s);
            scales.weight[l] = std::max(std::exp(log_w[l]), kMinScale);
            log_w[l] = std::log(scales.weight[l]);
          }
          for (std::size_t a = 0; a + 1 < layers; ++a) {
            if (!bits.quantized_activation(a)) continue;
            double g = config.zeta > 0.0 ? scale_grad_activations(acts[a].array(), scales.activation[a],
                                                                 bits.activation[a], config.zeta)
                                         : 0.0;
            if (pow2) g += pow2_penalty_grad(scales.activation[a], reg.gamma2(), static_cast<double>(quant_a_layers));
            ascale_opt[a].step(log_a[a], scales.activation[a] * g, lr_s);
            scales.activation[a] = std::max(std::exp(log_a[a]), kMinScale);
            log_a[a] = std::log(scales.activation[a]);
          }
          if (pow2) {
            gamma1_opt.step(reg.gamma1_log, reg.gamma1() * terms.pow2_weight - reg.beta1, config.optimizer.lr_gamma);
            gamma2_opt.step(reg.gamma2_log, reg.gamma2() * terms.pow2_activation - reg.beta2, config.optimizer.lr_gamma);
            reg.gamma1_log = std::min(reg.gamma1_log, kMaxLogCoefficient);
            reg.gamma2_log = std::min(reg.gamma2_log, kMaxLogCoefficient);
          }
        }
        if (uses_lambda) {
          omega_opt.step(reg.omega, grad_omega(r.value, config.alpha, lambda), config.optimizer.lr_omega);
          reg.omega = std::min(reg.omega, kMaxLogCoefficient);
        }
      } else {
        ForwardResult fr = net.forward(x);
        LossResult loss = softmax_cross_entropy(fr.logits, y);
        net.backward(loss.grad);
        rec.task_loss = loss.loss;
        rec.cost = loss.loss;
        if (pruning) {
          const double theta = [&] {
            std::vector<Eigen::Map<const Eigen::VectorXd>> views;
            for (const auto& p : net.parameters()) views.emplace_back(p.weight.data().data(), p.weight.size());
            return prune_threshold(views, config.prune_ratio);
          }();
          double sum = 0.0;
          for (std::size_t l = 0; l < layers && uses_lambda; ++l) {
            Parameter& p = net.parameter(l);
            const auto w = p.weight.array();
            const Eigen::ArrayXd below = (w.abs() < theta).cast<double>();
            sum += (w.square() * below).sum();
            p.weight.grad().array() += lambda * (2.0 / static_cast<double>(weight_total)) * w * below;
          }
          const double pr = sum / static_cast<double>(weight_total);
          rec.theta = theta;
          rec.msqe = pr;
          if (uses_lambda) {
            rec.cost += lambda * pr - config.alpha * reg.omega;
            omega_opt.step(reg.omega, grad_omega(pr, config.alpha, lambda), config.optimizer.lr_omega);
            reg.omega = std::min(reg.omega, kMaxLogCoefficient);
          }
        }
        if (!std::isfinite(rec.cost)) {
          throw std::runtime_error("non-finite cost at iteration " + std::to_string(iteration));
        }
      }

      const double lr_w = config.optimizer.lr_weights * lr_factor;
      for (std::size_t l = 0; l < layers; ++l) {
        Parameter& p = net.parameter(l);
        if (masked) p.weight.grad().array() *= keep[l];
        weight_opt[l].step(p.weight.data(), p.weight.grad(), lr_w);
        bias_opt[l].step(p.bias.data(), p.bias.grad(), lr_w);
        if (masked) p.weight.array() *= keep[l];
      }

      rec.lambda = uses_lambda ? reg.lambda() : 0.0;
      rec.gamma1 = pow2 ? reg.gamma1() : 0.0;
      rec.gamma2 = pow2 ? reg.gamma2() : 0.0;
      rec.weight_scales = scales.weight;
      rec.activation_scales = scales.activation;
      result.log.iterations.push_back(std::move(rec));

      if (quantizing && config.histogram_every > 0 && (iteration + 1) % config.histogram_every == 0) {
        for (std::size_t l = 0; l < layers; ++l) {
          if (bits.quantized_weights(l)) {
            result.log.histograms.push_back(histogram(iteration + 1, l, net.parameter(l).weight, scales.weight[l]));
          }
        }
      }
    }

    const bool last = epoch + 1 == config.epochs;
    if (test_set != nullptr && (last || (config.eval_every_epochs > 0 && (epoch + 1) % config.eval_every_epochs == 0))) {
      const double acc = quantizing ? evaluate(net, *test_set, &scales, &bits, masked ? &result.mask : nullptr)
                                    : evaluate(net, *test_set);
      result.log.iterations.back().test_accuracy = acc;
      result.test_accuracy = acc;
      if (progress) progress(epoch, acc, result.log.iterations.back());
    } else if (progress) {
      progress(epoch, std::numeric_limits<double>::quiet_NaN(), result.log.iterations.back());
    }
  }
  return result;
}

TrainResult train_prune(const TrainConfig& config, Network& net, const ImageSet& train_set,
                        const ImageSet* test_set, const ProgressFn& progress) {
  if (config.mode != TrainMode::prune) throw std::invalid_argument("train_prune needs mode=prune");
  TrainResult result = train(config, net, train_set, test_set, std::nullopt, nullptr, progress);
  result.mask = zero_mask(net);
  if (config.prune_ratio > 0.0) {
    std::vector<Eigen::Map<const Eigen::VectorXd>> views;
    for (const auto& p : net.parameters()) views.emplace_back(p.weight.data().data(), p.weight.size());
    const double theta = prune_threshold(views, config.prune_ratio);
    for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
      auto& w = net.parameter(l).weight;
      for (Index i = 0; i < w.size(); ++i) {
        if (std::abs(w[i]) <= theta) {
          result.mask[l][static_cast<std::size_t>(i)] = 1;
          w[i] = 0.0;
        }
      }
    }
  }
  if (test_set != nullptr) result.test_accuracy = evaluate(net, *test_set);
  return result;
}

}  // namespace qatforge
