#include "qatforge/fixed_point.hpp"

#include "qatforge/bytes.hpp"
#include "layer_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace qatforge {

namespace {

using IntMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string layer_name(std::size_t param_index) { return "layer " + std::to_string(param_index + 1); }

Index fan_in(const LayerDef& d) {
  return d.kind == LayerKind::conv2d ? d.in_channels * d.kernel * d.kernel : d.in_features;
}

Shape weight_shape(const LayerDef& d) {
  if (d.kind == LayerKind::conv2d) return {d.out_channels, d.in_channels, d.kernel, d.kernel};
  return {d.out_features, d.in_features};
}

Index out_units(const LayerDef& d) { return d.kind == LayerKind::conv2d ? d.out_channels : d.out_features; }

int exact_log2(double x) {
  int e = 0;
  std::frexp(x, &e);
  return e - 1;
}

IntMatrix conv_int(const IntTensor& x, const FixedPointLayer& layer, Index& oh, Index& ow) {
  const LayerDef& d = layer.def;
  const Index batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), k = d.kernel;
  oh = (h + 2 * d.padding - k) / d.stride + 1;
  ow = (wd + 2 * d.padding - k) / d.stride + 1;
  const Index plane = oh * ow;
  IntMatrix cols(c * k * k, batch * plane);
  for (Index n = 0; n < batch; ++n) {
    for (Index ch = 0; ch < c; ++ch) {
      const std::int32_t* img = x.data().data() + (n * c + ch) * h * wd;
      for (Index ki = 0; ki < k; ++ki) {
        for (Index kj = 0; kj < k; ++kj) {
          std::int32_t* row = cols.row((ch * k + ki) * k + kj).data() + n * plane;
          for (Index y = 0; y < oh; ++y) {
            const Index iy = y * d.stride - d.padding + ki;
            for (Index xx = 0; xx < ow; ++xx) {
              const Index ix = xx * d.stride - d.padding + kj;
              row[y * ow + xx] = (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? img[iy * wd + ix] : 0;
            }
          }
        }
      }
    }
  }
  const auto w = layer.weight.matrix(d.out_channels, c * k * k);
  IntMatrix acc = w * cols;
  acc.colwise() += layer.bias.data();
  return acc;
}

template <typename Rescale>
TensorD run(const FixedPointModel& model, const IntTensor& input, std::vector<IntTensor>* codes, Rescale rescale) {
  if (input.rank() != 4 || input.dim(1) != model.input_shape.at(0) || input.dim(2) != model.input_shape.at(1) ||
      input.dim(3) != model.input_shape.at(2)) {
    throw std::invalid_argument("input shape " + shape_string(input.shape()) + " does not match the model");
  }
  const std::int32_t in_max = (1 << model.input_bits) - 1;
  if (input.size() > 0 && (input.data().minCoeff() < 0 || input.data().maxCoeff() > in_max)) {
    throw std::invalid_argument("input codes outside [0, " + std::to_string(in_max) + "]");
  }
  if (codes != nullptr) codes->clear();
  const Index batch = input.dim(0);
  IntTensor x = input;
  std::size_t p = 0;
  for (const FixedPointLayer& layer : model.layers) {
    const LayerDef& d = layer.def;
    switch (d.kind) {
      case LayerKind::conv2d:
      case LayerKind::fully_connected: {
        if (p > 0 && codes != nullptr) codes->push_back(x);
        IntMatrix acc;  // {units, batch * plane}
        Index oh = 1, ow = 1;
        if (d.kind == LayerKind::conv2d) {
          acc = conv_int(x, layer, oh, ow);
        } else {
          const auto xm = x.matrix(batch, d.in_features);
          acc = layer.weight.matrix(d.out_features, d.in_features) * xm.transpose();
          acc.colwise() += layer.bias.data();
        }
        const Index plane = oh * ow, units = out_units(d);
        if (layer.last()) {
          const double scale = layer.weight_scale * layer.input_scale;
          TensorD logits({batch, units * plane});
          for (Index n = 0; n < batch; ++n) {
            for (Index u = 0; u < units; ++u) {
              for (Index q = 0; q < plane; ++q) {
                logits[n * units * plane + u * plane + q] = static_cast<double>(acc(u, n * plane + q)) * scale;
              }
            }
          }
          return logits;
        }
        IntTensor y(d.kind == LayerKind::conv2d ? Shape{batch, units, oh, ow} : Shape{batch, units});
        for (Index n = 0; n < batch; ++n) {
          for (Index u = 0; u < units; ++u) {
            for (Index q = 0; q < plane; ++q) {
              y[(n * units + u) * plane + q] = rescale(layer, acc(u, n * plane + q));
            }
          }
        }
        x = std::move(y);
        ++p;
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool: {
        const Index c = x.dim(1), h = x.dim(2), wd = x.dim(3);
        const Index stride = d.stride;
        const Index oh = (h - d.kernel) / stride + 1, ow = (wd - d.kernel) / stride + 1;
        IntTensor y({batch, c, oh, ow});
        Index o = 0;
        for (Index nc = 0; nc < batch * c; ++nc) {
          const std::int32_t* src = x.data().data() + nc * h * wd;
          for (Index py = 0; py < oh; ++py) {
            for (Index px = 0; px < ow; ++px, ++o) {
              std::int32_t best = std::numeric_limits<std::int32_t>::min();
              for (Index ky = 0; ky < d.kernel; ++ky) {
                for (Index kx = 0; kx < d.kernel; ++kx) {
                  best = std::max(best, src[(py * stride + ky) * wd + px * stride + kx]);
                }
              }
              y[o] = best;
            }
          }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::softmax_cross_entropy:
        break;
    }
  }
  throw std::logic_error("fixed-point model has no final conv/FC layer");
}

void put_layer(ByteWriter& w, const FixedPointLayer& l) {
  const LayerDef& d = l.def;
  detail::put_layer_def(w, d);
  if (!d.parameterized()) return;
  w.put(static_cast<std::uint8_t>(l.weight_bits));
  w.put(static_cast<std::uint8_t>(l.input_bits));
  w.put(static_cast<std::uint8_t>(l.output_bits));
  w.put(l.weight_scale);
  w.put(l.input_scale);
  w.put(l.output_scale);
  w.put(static_cast<std::uint8_t>(l.shift ? 1 : 0));
  w.put(static_cast<std::int8_t>(l.shift_amount));
  for (Index i = 0; i < l.weight.size(); ++i) w.put(static_cast<std::int16_t>(l.weight[i]));
  for (Index i = 0; i < l.bias.size(); ++i) w.put(l.bias[i]);
}

FixedPointLayer get_layer(ByteReader& r) {
  FixedPointLayer l;
  l.def = detail::get_layer_def(r);
  if (l.def.kind == LayerKind::softmax_cross_entropy) r.fail("softmax head inside a fixed-point model");
  if (!l.def.parameterized()) return l;
  l.weight_bits = r.get<std::uint8_t>();
  l.input_bits = r.get<std::uint8_t>();
  l.output_bits = r.get<std::uint8_t>();
  l.weight_scale = r.get<double>();
  l.input_scale = r.get<double>();
  l.output_scale = r.get<double>();
  const auto flag = r.get<std::uint8_t>();
  if (flag > 1) r.fail("bad shift flag");
  l.shift = flag == 1;
  l.shift_amount = r.get<std::int8_t>();
  l.weight = IntTensor(weight_shape(l.def));
  for (Index i = 0; i < l.weight.size(); ++i) l.weight[i] = r.get<std::int16_t>();
  l.bias = IntTensor({out_units(l.def)});
  for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = r.get<std::int32_t>();
  return l;
}

}  // namespace

double FixedPointLayer::multiplier() const {
  return last() ? weight_scale * input_scale : weight_scale * input_scale / output_scale;
}

std::size_t FixedPointModel::parameterized_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const FixedPointLayer& l) { return l.def.parameterized(); }));
}

bool FixedPointModel::shift_capable() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const FixedPointLayer& l) { return !l.def.parameterized() || l.shift; });
}

std::int64_t accumulator_bound(const FixedPointLayer& layer) {
  const std::int64_t w = layer.weight_bits == 1 ? 1 : (std::int64_t{1} << (layer.weight_bits - 1));
  const std::int64_t a = (std::int64_t{1} << layer.input_bits) - 1;
  std::int64_t b = 0;
  for (Index i = 0; i < layer.bias.size(); ++i) b = std::max<std::int64_t>(b, std::abs(std::int64_t{layer.bias[i]}));
  return static_cast<std::int64_t>(fan_in(layer.def)) * w * a + b;
}

void FixedPointModel::validate() const {
  if (input_shape.size() != 3) throw std::invalid_argument("model input shape must be {C, H, W}");
  if (!(input_scale > 0.0) || input_bits < 1 || input_bits > 16) throw std::invalid_argument("bad input encoding");
  std::size_t p = 0;
  const std::size_t count = parameterized_count();
  if (count == 0) throw std::invalid_argument("model has no conv/FC layer");
  for (const FixedPointLayer& l : layers) {
    if (!l.def.parameterized()) continue;
    const std::string name = layer_name(p);
    const bool last = p + 1 == count;
    if (l.weight_bits < 1 || l.weight_bits > 16 || l.input_bits < 1 || l.input_bits > 16) {
      throw std::invalid_argument(name + ": bit-width out of range");
    }
    if (last != (l.output_bits == 0)) throw std::invalid_argument(name + ": only the last layer emits real logits");
    if (!(l.weight_scale > 0.0) || !(l.input_scale > 0.0) || (!last && !(l.output_scale > 0.0))) {
      throw std::invalid_argument(name + ": scales must be positive");
    }
    if (l.weight.shape() != weight_shape(l.def) || l.bias.shape() != Shape{out_units(l.def)}) {
      throw std::invalid_argument(name + ": code array shape does not match geometry");
    }
    const auto lo = static_cast<std::int32_t>(signed_code_min(l.weight_bits));
    const auto hi = static_cast<std::int32_t>(signed_code_max(l.weight_bits));
    for (Index i = 0; i < l.weight.size(); ++i) {
      const std::int32_t c = l.weight[i];
      if (c < lo || c > hi || (l.weight_bits == 1 && c == 0)) {
        throw std::invalid_argument(name + ": weight code " + std::to_string(c) + " outside the " +
                                    std::to_string(l.weight_bits) + "-bit range");
      }
    }
    if (l.shift) {
      if (!is_pow2(l.weight_scale) || !is_pow2(l.input_scale) || (!last && !is_pow2(l.output_scale))) {
        throw std::invalid_argument(name + ": shift flag set on non power-of-two scales");
      }
      if (std::ldexp(1.0, -l.shift_amount) != l.multiplier()) {
        throw std::invalid_argument(name + ": shift amount does not match the scales");
      }
    }
    const std::int64_t bound = accumulator_bound(l);
    if (bound > std::numeric_limits<std::int32_t>::max()) {
      throw std::overflow_error(name + ": accumulator bound " + std::to_string(bound) + " exceeds " +
                                std::to_string(kAccumulatorBits) + " bits");
    }
    ++p;
  }
}

FixedPointModel convert(const Network& net, const ScaleState& scales, const LayerBits& bits) {
  const std::size_t count = net.parameterized_count();
  for (std::size_t l = 0; l < count; ++l) {
    if (!bits.quantized_weights(l)) {
      throw ConversionError(layer_name(l) + " has full-precision weights; train with every layer quantized "
                            "(--quantize-all) before converting");
    }
  }
  for (std::size_t a = 0; a + 1 < count; ++a) {
    if (!bits.quantized_activation(a)) {
      throw ConversionError("input of " + layer_name(a + 1) + " is not quantized; train with activation "
                            "quantization before converting");
    }
  }
  FixedPointModel model;
  model.input_shape = net.input_shape();
  model.input_scale = scales.input;
  model.input_bits = kInputBits;
  std::size_t p = 0;
  for (std::size_t i = 0; i + 1 < net.layers().size(); ++i) {
    FixedPointLayer layer;
    layer.def = net.layers()[i];
    if (layer.def.parameterized()) {
      const Parameter& param = net.parameter(p);
      const int n = bits.weight[p];
      const double delta = scales.weight[p];
      const std::string name = layer_name(p);
      const auto w = param.weight.array();
      const double err = (w - quantize_signed(w, delta, n)).abs().maxCoeff();
      if (err > kConvertTolerance * delta) {
        std::ostringstream os;
        os << name << ": a weight is " << err / delta << " delta from the nearest level (limit "
           << kConvertTolerance << "); training has not converged, continue QAT before converting";
        throw ConversionError(os.str());
      }
      layer.weight = IntTensor(param.weight.shape());
      for (Index j = 0; j < w.size(); ++j) layer.weight[j] = static_cast<std::int32_t>(signed_code(w[j], delta, n));
      layer.weight_bits = n;
      layer.weight_scale = delta;
      layer.input_scale = scales.input_scale(p);
      layer.input_bits = p == 0 ? kInputBits : bits.activation[p - 1];
      const bool last = p + 1 == count;
      layer.output_bits = last ? 0 : bits.activation[p];
      layer.output_scale = last ? 0.0 : scales.activation[p];
      const double bscale = delta * layer.input_scale;
      layer.bias = IntTensor(param.bias.shape());
      for (Index j = 0; j < param.bias.size(); ++j) {
        const double c = round_half_away(param.bias[j] / bscale);
        if (std::abs(c) > std::numeric_limits<std::int32_t>::max()) {
          throw ConversionError(name + ": bias code does not fit in 32 bits");
        }
        layer.bias[j] = static_cast<std::int32_t>(c);
      }
      if (is_pow2(layer.weight_scale) && is_pow2(layer.input_scale) && (last || is_pow2(layer.output_scale))) {
        const int k = -exact_log2(layer.multiplier());
        if (k >= std::numeric_limits<std::int8_t>::min() && k <= std::numeric_limits<std::int8_t>::max()) {
          layer.shift = true;
          layer.shift_amount = k;
        }
      }
      ++p;
    }
    model.layers.push_back(std::move(layer));
  }
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw ConversionError(e.what());
  }
  return model;
}

std::int32_t requantize(std::int64_t acc, double multiplier, int bits) {
  const double v = round_half_away(static_cast<double>(acc) * multiplier);
  return static_cast<std::int32_t>(std::clamp(v, 0.0, unsigned_code_max(bits)));
}

std::int64_t rescale_shift(std::int64_t acc, int k) {
  if (k <= 0) return acc * (std::int64_t{1} << -k);
  const std::int64_t mag = acc < 0 ? -acc : acc;
  const std::int64_t q = (mag + (std::int64_t{1} << (k - 1))) >> k;
  return acc < 0 ? -q : q;
}

TensorD infer(const FixedPointModel& model, const IntTensor& input, std::vector<IntTensor>* codes) {
  return run(model, input, codes, [](const FixedPointLayer& l, std::int32_t acc) {
    return requantize(acc, l.multiplier(), l.output_bits);
  });
}

TensorD infer_shift(const FixedPointModel& model, const IntTensor& input, std::vector<IntTensor>* codes) {
  if (!model.shift_capable()) throw std::invalid_argument("infer_shift needs power-of-two scales in every layer");
  return run(model, input, codes, [](const FixedPointLayer& l, std::int32_t acc) {
    const std::int64_t v = rescale_shift(acc, l.shift_amount);
    const std::int64_t hi = (std::int64_t{1} << l.output_bits) - 1;
    return static_cast<std::int32_t>(std::clamp<std::int64_t>(v, 0, hi));
  });
}

DequantizedModel dequantize(const FixedPointModel& model) {
  std::vector<LayerDef> defs;
  for (const auto& l : model.layers) defs.push_back(l.def);
  defs.push_back(LayerDef::softmax_cross_entropy());
  DequantizedModel out{Network(defs, model.input_shape), {}, {}};
  out.scales.input = model.input_scale;
  std::size_t p = 0;
  for (const auto& l : model.layers) {
    if (!l.def.parameterized()) continue;
    Parameter& param = out.net.parameter(p);
    param.weight.data() = l.weight.data().cast<double>() * l.weight_scale;
    param.bias.data() = l.bias.data().cast<double>() * (l.weight_scale * l.input_scale);
    out.scales.weight.push_back(l.weight_scale);
    out.bits.weight.push_back(l.weight_bits);
    if (p > 0) {
      out.scales.activation.push_back(l.input_scale);
      out.bits.activation.push_back(l.input_bits);
    }
    ++p;
  }
  return out;
}

TensorD simulate_float(const FixedPointModel& model, const TensorD& input) {
  DequantizedModel dq = dequantize(model);
  QuantizationTap tap(dq.scales, dq.bits);
  return dq.net.forward(input, &tap).logits;
}

double evaluate_fixed_point(const FixedPointModel& model, const ImageSet& data, bool use_shift, Index batch_size) {
  if (data.count() == 0) throw std::invalid_argument("evaluation set is empty");
  Index correct = 0;
  std::vector<Index> idx;
  for (Index start = 0; start < data.count(); start += batch_size) {
    const Index end = std::min(start + batch_size, data.count());
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const IntTensor x = data.codes(idx);
    const TensorD logits = use_shift ? infer_shift(model, x) : infer(model, x);
    const Index classes = logits.dim(1);
    for (Index i = 0; i < end - start; ++i) {
      Index best = 0;
      for (Index c = 1; c < classes; ++c) {
        if (logits[i * classes + c] > logits[i * classes + best]) best = c;
      }
      if (best == data.labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.count());
}

std::vector<std::uint8_t> write_fxpm(const FixedPointModel& model) {
  model.validate();
  ByteWriter w;
  w.put_magic("FXPM");
  w.put(kFxpmVersion);
  w.put(static_cast<std::uint16_t>(model.layers.size()));
  for (Index v : model.input_shape) w.put(static_cast<std::uint32_t>(v));
  w.put(model.input_scale);
  w.put(static_cast<std::uint8_t>(model.input_bits));
  for (const auto& l : model.layers) put_layer(w, l);
  return std::move(w.bytes());
}

FixedPointModel read_fxpm(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "FXPM");
  r.expect_magic("FXPM");
  const auto version = r.get<std::uint16_t>();
  if (version != kFxpmVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint16_t>();
  FixedPointModel model;
  for (int i = 0; i < 3; ++i) model.input_shape.push_back(static_cast<Index>(r.get<std::uint32_t>()));
  model.input_scale = r.get<double>();
  model.input_bits = r.get<std::uint8_t>();
  for (std::uint16_t i = 0; i < count; ++i) model.layers.push_back(get_layer(r));
  r.expect_end();
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("FXPM: ") + e.what());
  }
  return model;
}

void save_fxpm(const FixedPointModel& model, const std::filesystem::path& path) {
  write_bytes(path, write_fxpm(model));
}

FixedPointModel load_fxpm(const std::filesystem::path& path) { return read_fxpm(read_bytes(path)); }

}  // namespace qatforge
