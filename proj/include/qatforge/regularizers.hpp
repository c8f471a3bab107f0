#pragma once

#include "qatforge/quantizers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace qatforge {

/// Learnable regularization coefficients in log form plus the fixed
/// hyper-parameters that pull them up.
struct RegState {
  double omega = 0.0;       // lambda = exp(omega)
  double gamma1_log = 0.0;  // gamma1 = exp(gamma1_log), weight-scale pow2 term
  double gamma2_log = 0.0;  // gamma2 = exp(gamma2_log), activation-scale pow2 term
  double alpha = 0.5;
  double zeta = 1.0;
  double beta1 = 1e-4;
  double beta2 = 1e-4;

  double lambda() const { return std::exp(omega); }
  double gamma1() const { return std::exp(gamma1_log); }
  double gamma2() const { return std::exp(gamma2_log); }
};

struct PruneConfig {
  double ratio = 0.0;
  double theta = 0.0;
};

namespace detail {

template <typename T>
decltype(auto) values(const T& t) {
  return t.array();
}

}  // namespace detail

/// Sum over one layer of |w - Q_n(w; delta)|^2.
template <typename Derived>
typename Derived::Scalar msqe_sum(const Eigen::ArrayBase<Derived>& w, typename Derived::Scalar delta, int bits) {
  return (w - quantize_signed(w, delta, bits)).square().sum();
}

/// Mean squared quantization error over all weights of all layers, with a
/// bit-width per layer.
template <typename Range>
double msqe_weights(const Range& layers, std::span<const double> deltas, std::span<const int> bits) {
  if (std::size(layers) == 0) throw std::invalid_argument("msqe needs at least one layer");
  if (deltas.size() != std::size(layers) || bits.size() != std::size(layers)) {
    throw std::invalid_argument("one scale and bit-width per layer required");
  }
  double sum = 0.0;
  double count = 0.0;
  std::size_t l = 0;
  for (const auto& w : layers) {
    detail::check_scale(deltas[l]);
    sum += msqe_sum(detail::values(w), deltas[l], bits[l]);
    count += static_cast<double>(detail::values(w).size());
    ++l;
  }
  return count > 0 ? sum / count : 0.0;
}

template <typename Range>
double msqe_weights(const Range& layers, std::span<const double> deltas, int bits) {
  std::vector<int> per_layer(std::size(layers), bits);
  return msqe_weights(layers, deltas, std::span<const int>(per_layer));
}

/// d R_n / d w: (2/N)(w - Q_n(w; delta)), zero on a cell boundary.
template <typename Scalar>
Scalar msqe_weights_grad(Scalar w, Scalar delta, int bits, double count) {
  if (on_signed_boundary(w, delta, bits)) return Scalar(0);
  return Scalar(2.0 / count) * (w - quantize_signed(w, delta, bits));
}

template <typename Derived>
auto msqe_weights_grad(const Eigen::ArrayBase<Derived>& w, typename Derived::Scalar delta, int bits, double count) {
  using Scalar = typename Derived::Scalar;
  detail::check_scale(delta);
  const Scalar scale = Scalar(2.0 / count);
  return w.unaryExpr([=](Scalar v) {
    return on_signed_boundary(v, delta, bits) ? Scalar(0) : scale * (v - delta * signed_code(v, delta, bits));
  });
}

/// Mean over the activation set of |x - Q+_m(x; Delta)|^2.
template <typename Derived>
double msqe_activations(const Eigen::ArrayBase<Derived>& acts, typename Derived::Scalar delta, int bits) {
  if (acts.size() == 0) throw std::invalid_argument("activation set is empty");
  return static_cast<double>((acts - quantize_unsigned(acts, delta, bits)).square().sum()) /
         static_cast<double>(acts.size());
}

/// Approximate d(lambda R_n)/d delta for one layer, holding each weight's code
/// fixed: -(2 lambda / N) sum (w - Q) r_n(w) over weights off the boundaries.
template <typename Derived>
double scale_grad_weights(const Eigen::ArrayBase<Derived>& w, typename Derived::Scalar delta, int bits,
                          double lambda, double count) {
  using Scalar = typename Derived::Scalar;
  detail::check_scale(delta);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const Scalar v = w.derived().coeff(i);
    if (on_signed_boundary(v, delta, bits)) continue;
    const Scalar code = signed_code(v, delta, bits);
    acc += static_cast<double>((v - delta * code) * code);
  }
  return -2.0 * lambda / count * acc;
}

/// Activation analogue: -(2 zeta / |A|) sum (x - Q+) clip+(round(x / Delta))
/// over values off the unsigned boundaries.
template <typename Derived>
double scale_grad_activations(const Eigen::ArrayBase<Derived>& acts, typename Derived::Scalar delta, int bits,
                              double zeta) {
  using Scalar = typename Derived::Scalar;
  detail::check_scale(delta);
  if (acts.size() == 0) throw std::invalid_argument("activation set is empty");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < acts.size(); ++i) {
    const Scalar v = acts.derived().coeff(i);
    if (on_unsigned_boundary(v, delta, bits)) continue;
    const Scalar code = unsigned_code(v, delta, bits);
    acc += static_cast<double>((v - delta * code) * code);
  }
  return -2.0 * zeta / static_cast<double>(acts.size()) * acc;
}

/// Mean squared distance of each scale to its nearest power of two.
inline double pow2_penalty(std::span<const double> scales) {
  if (scales.empty()) return 0.0;
  double sum = 0.0;
  for (double s : scales) {
    if (!(s > 0.0)) throw std::invalid_argument("scales must be positive");
    const double d = s - round_pow2(s);
    sum += d * d;
  }
  return sum / static_cast<double>(scales.size());
}

/// Additive gradient of gamma * T(scales) for one scale; zero at a rounding boundary.
inline double pow2_penalty_grad(double scale, double gamma, double count) {
  if (on_pow2_boundary(scale)) return 0.0;
  return 2.0 * gamma / count * (scale - round_pow2(scale));
}

/// Nearest-rank r-th percentile of |w| pooled over all layers; 0 when r = 0.
template <typename Range>
double prune_threshold(const Range& layers, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("prune ratio must be in [0, 1)");
  std::vector<double> mags;
  for (const auto& w : layers) {
    const auto& a = detail::values(w);
    for (Eigen::Index i = 0; i < a.size(); ++i) mags.push_back(std::abs(static_cast<double>(a.coeff(i))));
  }
  if (ratio == 0.0 || mags.empty()) return 0.0;
  const double exact = ratio * static_cast<double>(mags.size());
  auto rank = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, mags.size());
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(rank - 1), mags.end());
  return mags[rank - 1];
}

/// (1/N) sum of w^2 over weights strictly below theta in magnitude.
template <typename Range>
double partial_l2(const Range& layers, double theta, double count) {
  double sum = 0.0;
  for (const auto& w : layers) {
    const auto& a = detail::values(w);
    sum += (a.abs() < theta).select(a.square(), 0.0).sum();
  }
  return count > 0 ? sum / count : 0.0;
}

template <typename Scalar>
Scalar partial_l2_grad(Scalar w, double theta, double count) {
  return std::abs(w) < theta ? Scalar(2.0 / count) * w : Scalar(0);
}

}  // namespace qatforge
