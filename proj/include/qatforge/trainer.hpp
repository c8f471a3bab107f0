#pragma once

#include "qatforge/adam.hpp"
#include "qatforge/data.hpp"
#include "qatforge/network.hpp"
#include "qatforge/quantizers.hpp"
#include "qatforge/regularizers.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace qatforge {

/// Bits used for bias codes, whose scale is delta_l * Delta_(l-1). Biases are
/// added into the 32-bit accumulator, so only the accumulator width bounds them.
inline constexpr int kBiasBits = 32;
inline constexpr double kMinScale = 1e-8;
inline constexpr double kMaxLogCoefficient = 40.0;

enum class TrainMode { float_baseline, qat, qat_pow2, prune, prune_then_qat };

const char* train_mode_name(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

/// Per-layer bit-widths after overrides. 0 means full precision.
struct LayerBits {
  std::vector<int> weight;      // one per parameterized layer
  std::vector<int> activation;  // one per input of parameterized layers 2..L

  bool quantized_weights(std::size_t l) const { return weight.at(l) > 0; }
  bool quantized_activation(std::size_t a) const { return activation.at(a) > 0; }
};

/// Input encoding used by power-of-two models, so the first rescale is a shift.
inline constexpr double kPow2InputScale = 1.0 / 256.0;

/// Per-layer learnable scales. activation[a] scales the input of
/// parameterized layer a + 1; `input` is the fixed image encoding scale.
struct ScaleState {
  std::vector<double> weight;
  std::vector<double> activation;
  double input = kInputScale;

  /// Scale of the input feeding parameterized layer l.
  double input_scale(std::size_t l) const { return l == 0 ? input : activation.at(l - 1); }
};

/// Pruning mask per parameterized layer: 1 = pruned (weight held at zero).
using PruneMask = std::vector<std::vector<std::uint8_t>>;

struct OptimizerConfig {
  double lr_weights = 1e-3;
  double lr_scales = 1e-3;
  double lr_omega = 1e-4;
  double lr_gamma = 1e-4;
  AdamConfig adam;
  /// Fractions of total iterations at which weight/scale rates are multiplied by decay_factor.
  std::vector<double> decay_at = {0.5, 0.8};
  double decay_factor = 0.1;
};

struct TrainConfig {
  TrainMode mode = TrainMode::float_baseline;
  QuantSpec quant;
  bool quantize_activations = true;
  bool skip_first_last = false;
  double alpha = 0.5;
  double zeta = 1.0;
  double beta1 = 0.5;
  double beta2 = 0.5;
  double prune_ratio = 0.0;
  OptimizerConfig optimizer;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 1;
  /// qat_pow2: fraction of iterations after which scales snap to powers of two and freeze.
  double pow2_snap_at = 0.8;
  int calibration_samples = 256;
  int histogram_every = 1000;
  /// Evaluate the test set every this many epochs (and always at the end).
  int eval_every_epochs = 1;
  /// Optional cap on iterations per epoch (0 = full pass); used by short runs.
  int max_iterations_per_epoch = 0;

  void validate() const;
  bool quantizing() const {
    return mode == TrainMode::qat || mode == TrainMode::qat_pow2 || mode == TrainMode::prune_then_qat;
  }
};

/// Resolved per-layer bit-widths for a network with `layers` parameterized layers.
LayerBits resolve_layer_bits(const TrainConfig& config, std::size_t layers);

struct IterationRecord {
  long iteration = 0;
  int epoch = 0;
  double task_loss = 0.0;
  double msqe = 0.0;
  double lambda = 0.0;
  double activation_msqe = 0.0;
  double cost = 0.0;
  double theta = 0.0;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  std::vector<double> weight_scales;
  std::vector<double> activation_scales;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr int kHistogramBins = 201;

struct HistogramSnapshot {
  long iteration = 0;
  std::size_t layer = 0;
  double delta = 0.0;
  std::vector<long> counts;
  long underflow = 0;
  long overflow = 0;
};

struct TrainLog {
  std::vector<IterationRecord> iterations;
  std::vector<HistogramSnapshot> histograms;
};

/// Cost components of one evaluated batch.
struct CostTerms {
  double cost = 0.0;
  double task_loss = 0.0;
  double msqe = 0.0;
  std::vector<double> activation_msqe;
  double log_penalty = 0.0;  // -alpha log lambda
  double pow2_weight = 0.0;  // T(delta)
  double pow2_activation = 0.0;  // T(Delta)
  double pow2_terms = 0.0;  // gamma1 T(delta) + gamma2 T(Delta) - sum beta_i log gamma_i
};

/// C = E + lambda R_n - alpha log lambda + zeta sum S_m.
CostTerms assemble_qat_cost(double task_loss, double msqe, std::span<const double> activation_msqe,
                            const RegState& reg);
/// C_pow2 = C + gamma1 T(delta) + gamma2 T(Delta) - beta1 log gamma1 - beta2 log gamma2.
CostTerms assemble_pow2_cost(CostTerms base, const ScaleState& scales, const LayerBits& bits,
                             const RegState& reg);

/// Total weight gradient: task gradient plus (2 lambda / N)(w - Q_n(w)) off
/// the cell boundaries.
double grad_weight(double w, double delta, int bits, double lambda, double count, double task_grad);
/// d C / d lambda = R_n - alpha / lambda.
double grad_lambda(double msqe, double alpha, double lambda);
/// d C / d omega with lambda = exp(omega): lambda R_n - alpha.
double grad_omega(double msqe, double alpha, double lambda);

/// Forward tap that quantizes weights, biases and activations using the
/// current scales.
class QuantizationTap : public ForwardTap {
 public:
  QuantizationTap(const ScaleState& scales, const LayerBits& bits, const PruneMask* mask = nullptr)
      : scales_(scales), bits_(bits), mask_(mask) {}
  void parameters(std::size_t index, const Parameter& raw, TappedParameters& out) const override;
  void activation(std::size_t index, TensorD& values, TensorD& pass) const override;

 private:
  const ScaleState& scales_;
  const LayerBits& bits_;
  const PruneMask* mask_;
};

/// Quantization MSQE over weights and biases of the quantized layers and the
/// element count it is averaged over.
struct WeightMsqe {
  double value = 0.0;
  double count = 0.0;
};
WeightMsqe weight_msqe(const Network& net, const ScaleState& scales, const LayerBits& bits);

/// Batch cost with quantized forward; when `backprop` is set, parameter
/// gradients hold the task-loss gradient routed through the STE.
CostTerms cost_qat(Network& net, const TensorD& images, std::span<const int> labels, const ScaleState& scales,
                   const RegState& reg, const LayerBits& bits, bool backprop = false,
                   std::vector<TensorD>* activations = nullptr, const PruneMask* mask = nullptr);
CostTerms cost_pow2(Network& net, const TensorD& images, std::span<const int> labels, const ScaleState& scales,
                    const RegState& reg, const LayerBits& bits, bool backprop = false,
                    std::vector<TensorD>* activations = nullptr, const PruneMask* mask = nullptr);

/// Nearest-rank p-th percentile (p in (0, 1]) of the given values.
double percentile(std::vector<double> values, double p);

/// Weight scales from the 99th-percentile weight magnitude and activation
/// scales from the 99th percentile of calibration activations. Pruned
/// weights are excluded from the weight percentile.
ScaleState init_scales(Network& net, const LayerBits& bits, const TensorD& calibration,
                       const PruneMask* mask = nullptr);

/// Largest |w - Q(w)| / delta per quantized layer (0 for full-precision layers).
std::vector<double> max_quantization_error(const Network& net, const ScaleState& scales, const LayerBits& bits);

/// Fraction of correctly classified samples; quantized forward when `scales` is given.
double evaluate(Network& net, const ImageSet& data, const ScaleState* scales = nullptr,
                const LayerBits* bits = nullptr, const PruneMask* mask = nullptr, Index batch_size = 500);

struct TrainResult {
  ScaleState scales;
  RegState reg;
  LayerBits bits;
  TrainLog log;
  PruneMask mask;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Called after each evaluation with (epoch, accuracy).
using ProgressFn = std::function<void(int, double, const IterationRecord&)>;

/// Mini-batch Adam training for every mode. For qat/qat_pow2/prune_then_qat
/// the scales are initialized from `initial_scales` when given, otherwise
/// from a calibration batch. prune_then_qat holds `mask` weights at zero.
TrainResult train(const TrainConfig& config, Network& net, const ImageSet& train_set, const ImageSet* test_set,
                  const std::optional<ScaleState>& initial_scales = std::nullopt, const PruneMask* mask = nullptr,
                  const ProgressFn& progress = {});

/// Partial-L2 pruning run; on return the weights with |w| <= theta(r) are
/// exactly zero and marked in the result mask.
TrainResult train_prune(const TrainConfig& config, Network& net, const ImageSet& train_set,
                        const ImageSet* test_set, const ProgressFn& progress = {});

/// Zero the masked weights of a network.
void apply_mask(Network& net, const PruneMask& mask);
PruneMask zero_mask(const Network& net);

}  // namespace qatforge
