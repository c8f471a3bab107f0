#pragma once

#include "qatforge/network.hpp"
#include "qatforge/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace qatforge {

inline constexpr std::uint16_t kFxpmVersion = 1;
inline constexpr int kAccumulatorBits = 32;
/// Conversion refuses weights farther than this many deltas from a level.
inline constexpr double kConvertTolerance = 0.25;

/// Raised when a trained network cannot be turned into an integer model.
class ConversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One layer of an integer-only model. relu and maxpool layers carry only
/// geometry; conv and FC layers carry codes and scales.
struct FixedPointLayer {
  LayerDef def;
  IntTensor weight;  // codes in [-2^(n-1), 2^(n-1) - 1], n = 1 uses {-1, +1}
  IntTensor bias;    // codes at scale weight_scale * input_scale
  int weight_bits = 0;
  int input_bits = 0;
  int output_bits = 0;  // 0 on the last layer, whose output is real logits
  double weight_scale = 0.0;
  double input_scale = 0.0;
  double output_scale = 0.0;
  bool shift = false;
  int shift_amount = 0;  // rescale is 2^-shift_amount when shift is set

  /// weight_scale * input_scale / output_scale, or weight_scale * input_scale on the last layer.
  double multiplier() const;
  bool last() const { return output_bits == 0; }
  friend bool operator==(const FixedPointLayer&, const FixedPointLayer&) = default;
};

struct FixedPointModel {
  Shape input_shape;
  double input_scale = kInputScale;
  int input_bits = kInputBits;
  std::vector<FixedPointLayer> layers;

  std::size_t parameterized_count() const;
  /// True when every rescale can be done with a shift.
  bool shift_capable() const;
  /// Checks code ranges, scales and the static accumulator bound; throws on violation.
  void validate() const;
  friend bool operator==(const FixedPointModel&, const FixedPointModel&) = default;
};

/// Largest |accumulator| a layer can reach: fan_in * 2^(n-1) * (2^m - 1) + max |bias code|.
std::int64_t accumulator_bound(const FixedPointLayer& layer);

/// Integer model from a trained network. Every conv/FC layer and every
/// activation must be quantized.
FixedPointModel convert(const Network& net, const ScaleState& scales, const LayerBits& bits);

/// round_half_away(acc * multiplier) clipped to [0, 2^bits - 1]; ReLU is the lower clip.
std::int32_t requantize(std::int64_t acc, double multiplier, int bits);
/// acc * 2^-k with round-half-away-from-zero; k <= 0 shifts left.
std::int64_t rescale_shift(std::int64_t acc, int k);

/// Integer inference on 8-bit input codes {N, C, H, W}. Returns real logits
/// {N, classes}. When `codes` is given it receives the unsigned activation
/// codes entering each parameterized layer after the first.
TensorD infer(const FixedPointModel& model, const IntTensor& input, std::vector<IntTensor>* codes = nullptr);
/// Same as infer, with every rescale done as an arithmetic shift.
TensorD infer_shift(const FixedPointModel& model, const IntTensor& input, std::vector<IntTensor>* codes = nullptr);
/// Real-arithmetic forward with quantizers applied, on real input {N, C, H, W}.
TensorD simulate_float(const FixedPointModel& model, const TensorD& input);

/// Network, scales and bit-widths that reproduce the model in real arithmetic.
struct DequantizedModel {
  Network net;
  ScaleState scales;
  LayerBits bits;
};
DequantizedModel dequantize(const FixedPointModel& model);

/// Top-1 accuracy of integer inference over a whole set.
double evaluate_fixed_point(const FixedPointModel& model, const ImageSet& data, bool use_shift = false,
                            Index batch_size = 500);

std::vector<std::uint8_t> write_fxpm(const FixedPointModel& model);
FixedPointModel read_fxpm(const std::vector<std::uint8_t>& bytes);
void save_fxpm(const FixedPointModel& model, const std::filesystem::path& path);
FixedPointModel load_fxpm(const std::filesystem::path& path);

}  // namespace qatforge
