#include "qatforge/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qatforge {

namespace {

std::invalid_argument layer_error(std::size_t index, const std::string& what) {
  return std::invalid_argument("layer " + std::to_string(index) + ": " + what);
}

Index conv_extent(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

const TensorD& effective(const TensorD& tapped, const TensorD& raw) {
  return tapped.empty() ? raw : tapped;
}

void apply_pass(Eigen::Ref<Eigen::VectorXd> grad, const TensorD& pass) {
  if (!pass.empty()) grad.array() *= pass.array();
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::fully_connected: return "fully-connected";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::softmax_cross_entropy: return "softmax-cross-entropy";
  }
  return "unknown";
}

LayerDef LayerDef::conv2d(Index in_channels, Index out_channels, Index kernel, Index stride,
                          Index padding) {
  LayerDef d;
  d.kind = LayerKind::conv2d;
  d.in_channels = in_channels;
  d.out_channels = out_channels;
  d.kernel = kernel;
  d.stride = stride;
  d.padding = padding;
  return d;
}

LayerDef LayerDef::fully_connected(Index in_features, Index out_features) {
  LayerDef d;
  d.kind = LayerKind::fully_connected;
  d.in_features = in_features;
  d.out_features = out_features;
  return d;
}

LayerDef LayerDef::relu() { return LayerDef{}; }

LayerDef LayerDef::maxpool(Index kernel, Index stride) {
  LayerDef d;
  d.kind = LayerKind::maxpool;
  d.kernel = kernel;
  d.stride = stride > 0 ? stride : kernel;
  return d;
}

LayerDef LayerDef::softmax_cross_entropy() {
  LayerDef d;
  d.kind = LayerKind::softmax_cross_entropy;
  return d;
}

LossResult softmax_cross_entropy(const TensorD& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("logits must be {batch, classes}");
  const Index batch = logits.dim(0);
  const Index classes = logits.dim(1);
  if (static_cast<Index>(labels.size()) != batch) {
    throw std::invalid_argument("label count does not match batch size");
  }
  LossResult out;
  out.grad = TensorD(logits.shape());
  auto z = logits.matrix(batch, classes);
  auto g = out.grad.matrix(batch, classes);
  double total = 0.0;
  for (Index i = 0; i < batch; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= classes) throw std::invalid_argument("label out of range");
    const double zmax = z.row(i).maxCoeff();
    auto e = (z.row(i).array() - zmax).exp();
    const double sum = e.sum();
    g.row(i) = e / sum;
    total += std::log(sum) - (z(i, label) - zmax);
    g(i, label) -= 1.0;
  }
  g /= static_cast<double>(batch);
  out.loss = total / static_cast<double>(batch);
  return out;
}

Network::Network(std::vector<LayerDef> layers, Shape input_shape)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)) {
  if (input_shape_.size() != 3) throw std::invalid_argument("input shape must be {C, H, W}");
  if (layers_.empty() || layers_.back().kind != LayerKind::softmax_cross_entropy) {
    throw std::invalid_argument("network must end with a softmax-cross-entropy head");
  }
  shapes_.push_back(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerDef& d = layers_[i];
    const Shape& in = shapes_.back();
    Shape out;
    switch (d.kind) {
      case LayerKind::conv2d: {
        if (in.size() != 3) throw layer_error(i, "conv2d needs a {C,H,W} input");
        if (in[0] != d.in_channels) {
          throw layer_error(i, "expected " + std::to_string(d.in_channels) + " input channels, got " +
                                   std::to_string(in[0]));
        }
        if (d.kernel <= 0 || d.stride <= 0 || d.padding < 0 || d.out_channels <= 0) {
          throw layer_error(i, "invalid conv2d geometry");
        }
        const Index oh = conv_extent(in[1], d.kernel, d.stride, d.padding);
        const Index ow = conv_extent(in[2], d.kernel, d.stride, d.padding);
        if (oh <= 0 || ow <= 0) throw layer_error(i, "kernel larger than input");
        out = {d.out_channels, oh, ow};
        Parameter p{TensorD({d.out_channels, d.in_channels, d.kernel, d.kernel}), TensorD({d.out_channels})};
        params_.push_back(std::move(p));
        param_layers_.push_back(i);
        break;
      }
      case LayerKind::fully_connected: {
        if (shape_size(in) != d.in_features) {
          throw layer_error(i, "expected " + std::to_string(d.in_features) + " input features, got " +
                                   std::to_string(shape_size(in)));
        }
        if (d.out_features <= 0) throw layer_error(i, "invalid fully-connected geometry");
        out = {d.out_features};
        Parameter p{TensorD({d.out_features, d.in_features}), TensorD({d.out_features})};
        params_.push_back(std::move(p));
        param_layers_.push_back(i);
        break;
      }
      case LayerKind::relu:
        out = in;
        break;
      case LayerKind::maxpool: {
        if (in.size() != 3) throw layer_error(i, "maxpool needs a {C,H,W} input");
        if (d.kernel <= 0 || d.stride <= 0) throw layer_error(i, "invalid maxpool geometry");
        const Index oh = conv_extent(in[1], d.kernel, d.stride, 0);
        const Index ow = conv_extent(in[2], d.kernel, d.stride, 0);
        if (oh <= 0 || ow <= 0) throw layer_error(i, "pool window larger than input");
        out = {in[0], oh, ow};
        break;
      }
      case LayerKind::softmax_cross_entropy:
        if (i + 1 != layers_.size()) throw layer_error(i, "softmax-cross-entropy must be last");
        if (in.size() != 1) throw layer_error(i, "softmax-cross-entropy needs flat logits");
        out = in;
        break;
    }
    shapes_.push_back(std::move(out));
  }
  if (params_.empty()) throw std::invalid_argument("network has no parameterized layers");
}

Index Network::weight_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.weight.size();
  return n;
}

Index Network::bias_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.bias.size();
  return n;
}

void Network::initialize(std::mt19937_64& rng) {
  for (auto& p : params_) {
    const Index fan_in = p.weight.size() / p.weight.dim(0);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index i = 0; i < p.weight.size(); ++i) p.weight[i] = dist(rng);
    p.bias.data().setZero();
  }
}

void Network::zero_grad() {
  for (auto& p : params_) {
    p.weight.zero_grad();
    p.bias.zero_grad();
  }
}

ForwardResult Network::forward(const TensorD& input, const ForwardTap* tap) {
  if (input.rank() != 4 || input.dim(1) != input_shape_[0] || input.dim(2) != input_shape_[1] ||
      input.dim(3) != input_shape_[2]) {
    throw layer_error(0, "input shape " + shape_string(input.shape()) + " does not match {N," +
                             shape_string(input_shape_).substr(1));
  }
  const Index batch = input.dim(0);
  ForwardResult result;
  tape_.clear();
  activation_pass_.clear();
  recorded_ = false;

  TensorD x = input;
  std::size_t param_index = 0;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    const LayerDef& d = layers_[i];
    Shape out_shape{batch};
    for (Index v : shapes_[i + 1]) out_shape.push_back(v);

    if (d.parameterized() && param_index > 0) {
      result.activations.push_back(x);
      TensorD pass;
      if (tap) tap->activation(param_index - 1, x, pass);
      activation_pass_.push_back(std::move(pass));
    }

    switch (d.kind) {
      case LayerKind::conv2d: {
        detail::ConvState st;
        st.def = d;
        st.in_shape = x.shape();
        const Parameter& raw = params_[param_index];
        if (tap) tap->parameters(param_index, raw, st.params);
        const TensorD& w = effective(st.params.weight, raw.weight);
        const TensorD& b = effective(st.params.bias, raw.bias);

        const Index c = d.in_channels, h = x.dim(2), wd = x.dim(3), k = d.kernel;
        const Index oh = shapes_[i + 1][1], ow = shapes_[i + 1][2], plane = oh * ow;
        st.out_h = oh;
        st.out_w = ow;
        st.columns.resize(c * k * k, batch * plane);
        const double* src = x.data().data();
        for (Index n = 0; n < batch; ++n) {
          for (Index ch = 0; ch < c; ++ch) {
            const double* img = src + (n * c + ch) * h * wd;
            for (Index ki = 0; ki < k; ++ki) {
              for (Index kj = 0; kj < k; ++kj) {
                double* row = st.columns.row((ch * k + ki) * k + kj).data() + n * plane;
                for (Index y = 0; y < oh; ++y) {
                  const Index iy = y * d.stride - d.padding + ki;
                  for (Index xx = 0; xx < ow; ++xx) {
                    const Index ix = xx * d.stride - d.padding + kj;
                    row[y * ow + xx] = (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? img[iy * wd + ix] : 0.0;
                  }
                }
              }
            }
          }
        }
        const auto wm = w.matrix(d.out_channels, c * k * k);
        RowMatrix<double> out = wm * st.columns;
        out.colwise() += b.data();
        TensorD y(out_shape);
        for (Index n = 0; n < batch; ++n) {
          for (Index f = 0; f < d.out_channels; ++f) {
            Eigen::Map<Eigen::VectorXd>(y.data().data() + (n * d.out_channels + f) * plane, plane) =
                out.row(f).segment(n * plane, plane).transpose();
          }
        }
        x = std::move(y);
        tape_.emplace_back(std::move(st));
        ++param_index;
        break;
      }
      case LayerKind::fully_connected: {
        detail::DenseState st;
        st.def = d;
        st.in_shape = x.shape();
        const Parameter& raw = params_[param_index];
        if (tap) tap->parameters(param_index, raw, st.params);
        const TensorD& w = effective(st.params.weight, raw.weight);
        const TensorD& b = effective(st.params.bias, raw.bias);
        st.input = x.matrix(batch, d.in_features);
        TensorD y(out_shape);
        auto ym = y.matrix(batch, d.out_features);
        ym.noalias() = st.input * w.matrix(d.out_features, d.in_features).transpose();
        ym.rowwise() += b.data().transpose();
        x = std::move(y);
        tape_.emplace_back(std::move(st));
        ++param_index;
        break;
      }
      case LayerKind::relu: {
        detail::ReluState st{x};
        x.array() = x.array().max(0.0);
        tape_.emplace_back(std::move(st));
        break;
      }
      case LayerKind::maxpool: {
        detail::PoolState st;
        st.def = d;
        st.in_shape = x.shape();
        const Index c = x.dim(1), h = x.dim(2), wd = x.dim(3);
        const Index oh = shapes_[i + 1][1], ow = shapes_[i + 1][2];
        TensorD y(out_shape);
        st.argmax.resize(static_cast<std::size_t>(y.size()));
        Index o = 0;
        for (Index nc = 0; nc < batch * c; ++nc) {
          const Index base = nc * h * wd;
          for (Index py = 0; py < oh; ++py) {
            for (Index px = 0; px < ow; ++px, ++o) {
              Index best = base + (py * d.stride) * wd + px * d.stride;
              for (Index ky = 0; ky < d.kernel; ++ky) {
                for (Index kx = 0; kx < d.kernel; ++kx) {
                  const Index idx = base + (py * d.stride + ky) * wd + px * d.stride + kx;
                  if (x[idx] > x[best]) best = idx;
                }
              }
              y[o] = x[best];
              st.argmax[static_cast<std::size_t>(o)] = best;
            }
          }
        }
        x = std::move(y);
        tape_.emplace_back(std::move(st));
        break;
      }
      case LayerKind::softmax_cross_entropy:
        break;
    }
  }
  result.logits = std::move(x);
  recorded_ = true;
  return result;
}

TensorD Network::backward(const TensorD& logits_grad) {
  if (!recorded_) throw std::logic_error("backward called without a preceding forward");
  TensorD g = logits_grad;
  std::size_t param_index = params_.size();
  for (std::size_t t = tape_.size(); t-- > 0;) {
    std::visit(
        [&](auto& st) {
          using State = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<State, detail::ConvState>) {
            --param_index;
            Parameter& p = params_[param_index];
            const LayerDef& d = st.def;
            const Index batch = st.in_shape[0], c = st.in_shape[1], h = st.in_shape[2], wd = st.in_shape[3];
            const Index k = d.kernel, plane = st.out_h * st.out_w, f = d.out_channels;
            RowMatrix<double> gm(f, batch * plane);
            for (Index n = 0; n < batch; ++n) {
              for (Index o = 0; o < f; ++o) {
                gm.row(o).segment(n * plane, plane) =
                    Eigen::Map<const Eigen::RowVectorXd>(g.data().data() + (n * f + o) * plane, plane);
              }
            }
            const TensorD& w = effective(st.params.weight, p.weight);
            RowMatrix<double> dw = gm * st.columns.transpose();
            p.weight.grad() = Eigen::Map<Eigen::VectorXd>(dw.data(), dw.size());
            apply_pass(p.weight.grad(), st.params.weight_pass);
            p.bias.grad() = gm.rowwise().sum();
            apply_pass(p.bias.grad(), st.params.bias_pass);

            RowMatrix<double> dcol = w.matrix(f, c * k * k).transpose() * gm;
            TensorD dx(st.in_shape);
            double* dst = dx.data().data();
            for (Index n = 0; n < batch; ++n) {
              for (Index ch = 0; ch < c; ++ch) {
                double* img = dst + (n * c + ch) * h * wd;
                for (Index ki = 0; ki < k; ++ki) {
                  for (Index kj = 0; kj < k; ++kj) {
                    const double* row = dcol.row((ch * k + ki) * k + kj).data() + n * plane;
                    for (Index y = 0; y < st.out_h; ++y) {
                      const Index iy = y * d.stride - d.padding + ki;
                      if (iy < 0 || iy >= h) continue;
                      for (Index xx = 0; xx < st.out_w; ++xx) {
                        const Index ix = xx * d.stride - d.padding + kj;
                        if (ix >= 0 && ix < wd) img[iy * wd + ix] += row[y * st.out_w + xx];
                      }
                    }
                  }
                }
              }
            }
            g = std::move(dx);
          } else if constexpr (std::is_same_v<State, detail::DenseState>) {
            --param_index;
            Parameter& p = params_[param_index];
            const LayerDef& d = st.def;
            const Index batch = st.in_shape[0];
            const auto gm = g.matrix(batch, d.out_features);
            const TensorD& w = effective(st.params.weight, p.weight);
            RowMatrix<double> dw = gm.transpose() * st.input;
            p.weight.grad() = Eigen::Map<Eigen::VectorXd>(dw.data(), dw.size());
            apply_pass(p.weight.grad(), st.params.weight_pass);
            p.bias.grad() = gm.colwise().sum().transpose();
            apply_pass(p.bias.grad(), st.params.bias_pass);
            TensorD dx(st.in_shape);
            dx.matrix(batch, d.in_features).noalias() = gm * w.matrix(d.out_features, d.in_features);
            g = std::move(dx);
          } else if constexpr (std::is_same_v<State, detail::ReluState>) {
            g.array() *= (st.input.array() > 0.0).template cast<double>();
          } else {
            TensorD dx(st.in_shape);
            for (std::size_t o = 0; o < st.argmax.size(); ++o) {
              dx[st.argmax[o]] += g[static_cast<Index>(o)];
            }
            g = std::move(dx);
          }
        },
        tape_[t]);

    const bool at_param = std::holds_alternative<detail::ConvState>(tape_[t]) ||
                          std::holds_alternative<detail::DenseState>(tape_[t]);
    if (at_param && param_index > 0) {
      apply_pass(g.data(), activation_pass_[param_index - 1]);
    }
  }
  return g;
}

std::vector<LayerDef> lenet5_layers() {
  return {LayerDef::conv2d(1, 20, 5),          LayerDef::relu(), LayerDef::maxpool(2),
          LayerDef::conv2d(20, 50, 5),         LayerDef::relu(), LayerDef::maxpool(2),
          LayerDef::fully_connected(800, 500), LayerDef::relu(), LayerDef::fully_connected(500, 10),
          LayerDef::softmax_cross_entropy()};
}

Shape mnist_input_shape() { return {1, 28, 28}; }

}  // namespace qatforge
