#pragma once

#include "qatforge/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <variant>
#include <vector>

namespace qatforge {

enum class LayerKind : std::uint8_t {
  conv2d = 1,
  fully_connected = 2,
  relu = 3,
  maxpool = 4,
  softmax_cross_entropy = 5,
};

const char* layer_kind_name(LayerKind kind);

/// Structural description of one layer. Geometry fields are only meaningful
/// for the kinds that use them.
struct LayerDef {
  LayerKind kind = LayerKind::relu;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 0;
  Index stride = 1;
  Index padding = 0;
  Index in_features = 0;
  Index out_features = 0;

  static LayerDef conv2d(Index in_channels, Index out_channels, Index kernel, Index stride = 1,
                         Index padding = 0);
  static LayerDef fully_connected(Index in_features, Index out_features);
  static LayerDef relu();
  static LayerDef maxpool(Index kernel, Index stride = 0);
  static LayerDef softmax_cross_entropy();

  bool parameterized() const {
    return kind == LayerKind::conv2d || kind == LayerKind::fully_connected;
  }
  friend bool operator==(const LayerDef&, const LayerDef&) = default;
};

/// Weights and bias of a conv or fully-connected layer. Conv weights are
/// {out, in, k, k}; fully-connected weights are {out, in}.
struct Parameter {
  TensorD weight;
  TensorD bias;
};

/// Parameters a tap substitutes into the forward pass, with the masks applied
/// to their gradients on the way back. An empty mask passes everything.
struct TappedParameters {
  TensorD weight;
  TensorD weight_pass;
  TensorD bias;
  TensorD bias_pass;
};

/// Hook used to inject quantization into forward/backward. Parameter indices
/// run over conv/FC layers only; activation index a is the input of
/// parameterized layer a + 1.
class ForwardTap {
 public:
  virtual ~ForwardTap() = default;
  virtual void parameters(std::size_t index, const Parameter& raw, TappedParameters& out) const = 0;
  virtual void activation(std::size_t index, TensorD& values, TensorD& pass) const = 0;
};

struct ForwardResult {
  TensorD logits;
  /// Values entering parameterized layers 2..L, recorded before any tap.
  std::vector<TensorD> activations;
};

struct LossResult {
  double loss = 0.0;
  TensorD grad;
};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
LossResult softmax_cross_entropy(const TensorD& logits, std::span<const int> labels);

namespace detail {

struct ConvState {
  LayerDef def;
  Shape in_shape;
  Index out_h = 0, out_w = 0;
  RowMatrix<double> columns;
  TappedParameters params;
};

struct DenseState {
  LayerDef def;
  Shape in_shape;
  RowMatrix<double> input;
  TappedParameters params;
};

struct ReluState {
  TensorD input;
};

struct PoolState {
  LayerDef def;
  Shape in_shape;
  std::vector<Index> argmax;
};

using LayerState = std::variant<ConvState, DenseState, ReluState, PoolState>;

}  // namespace detail

/// Sequential network over NCHW tensors with reverse-mode differentiation.
/// The layer list must end with a softmax-cross-entropy head; forward stops
/// at the logits feeding it.
class Network {
 public:
  Network() = default;
  Network(std::vector<LayerDef> layers, Shape input_shape);

  const std::vector<LayerDef>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  /// Per-sample shape at the output of layer i.
  const Shape& output_shape(std::size_t layer) const { return shapes_.at(layer + 1); }

  std::size_t parameterized_count() const { return params_.size(); }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::size_t index) { return params_.at(index); }
  const Parameter& parameter(std::size_t index) const { return params_.at(index); }
  /// Position of the parameterized layer in layers().
  std::size_t layer_position(std::size_t param_index) const { return param_layers_.at(param_index); }

  /// Total number of weights (biases excluded) over all conv/FC layers.
  Index weight_count() const;
  Index bias_count() const;

  /// He-uniform weights, zero biases.
  void initialize(std::mt19937_64& rng);

  ForwardResult forward(const TensorD& input, const ForwardTap* tap = nullptr);
  /// Writes parameter gradients and returns the gradient w.r.t. the input.
  TensorD backward(const TensorD& logits_grad);

  void zero_grad();

 private:
  std::vector<LayerDef> layers_;
  Shape input_shape_;
  std::vector<Shape> shapes_;
  std::vector<Parameter> params_;
  std::vector<std::size_t> param_layers_;

  std::vector<detail::LayerState> tape_;
  std::vector<TensorD> activation_pass_;
  bool recorded_ = false;
};

/// conv(20,5x5)-relu-maxpool-conv(50,5x5)-relu-maxpool-FC(500)-relu-FC(10).
std::vector<LayerDef> lenet5_layers();
Shape mnist_input_shape();

}  // namespace qatforge
