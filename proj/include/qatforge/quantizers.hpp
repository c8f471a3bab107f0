#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace qatforge {

/// Bit-widths for weights (n) and activations (m), plus the power-of-two
/// scaling switch.
struct QuantSpec {
  int weight_bits = 4;
  int activation_bits = 4;
  bool pow2_scaling = false;

  void validate() const {
    if (weight_bits < 1 || weight_bits > 16) {
      throw std::invalid_argument("weight bit-width must be in [1, 16], got " + std::to_string(weight_bits));
    }
    if (activation_bits < 1 || activation_bits > 16) {
      throw std::invalid_argument("activation bit-width must be in [1, 16], got " +
                                  std::to_string(activation_bits));
    }
  }
};

template <typename Scalar>
struct CellBoundaries {
  std::vector<Scalar> points;
};

namespace detail {

inline void check_scale(double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("quantization scale must be positive");
}

inline void check_bits(int bits) {
  if (bits < 1 || bits > 32) throw std::invalid_argument("bit-width must be in [1, 32]");
}

}  // namespace detail

/// sign(x) * floor(|x| + 0.5): ties round away from zero.
template <typename Scalar>
Scalar round_half_away(Scalar x) {
  const Scalar mag = std::floor(std::abs(x) + Scalar(0.5));
  return x < Scalar(0) ? -mag : mag;
}

inline double signed_code_min(int bits) { return bits == 1 ? -1.0 : -std::ldexp(1.0, bits - 1); }
inline double signed_code_max(int bits) { return bits == 1 ? 1.0 : std::ldexp(1.0, bits - 1) - 1.0; }
inline double unsigned_code_max(int bits) { return std::ldexp(1.0, bits) - 1.0; }

/// Integer code k with Q_n(x; delta) = delta * k. For n = 1 the code is
/// sign(x) with sign(0) = +1.
template <typename Scalar>
Scalar signed_code(Scalar x, Scalar delta, int bits) {
  if (bits == 1) return x < Scalar(0) ? Scalar(-1) : Scalar(1);
  const Scalar k = round_half_away(x / delta);
  return std::min(std::max(k, Scalar(signed_code_min(bits))), Scalar(signed_code_max(bits)));
}

template <typename Scalar>
Scalar unsigned_code(Scalar x, Scalar delta, int bits) {
  const Scalar k = round_half_away(x / delta);
  return std::min(std::max(k, Scalar(0)), Scalar(unsigned_code_max(bits)));
}

template <typename Scalar>
Scalar quantize_signed(Scalar x, Scalar delta, int bits) {
  detail::check_scale(delta);
  detail::check_bits(bits);
  return delta * signed_code(x, delta, bits);
}

template <typename Scalar>
Scalar quantize_unsigned(Scalar x, Scalar delta, int bits) {
  detail::check_scale(delta);
  detail::check_bits(bits);
  return delta * unsigned_code(x, delta, bits);
}

/// Straight-through pass mask for weights: the clipping range widened by a
/// half cell (n >= 2) or a full cell (n = 1).
template <typename Scalar>
int ste_weight_passmask(Scalar w, Scalar delta, int bits) {
  const Scalar t = w / delta;
  if (bits == 1) return (t >= Scalar(-2) && t <= Scalar(2)) ? 1 : 0;
  const Scalar half = Scalar(std::ldexp(1.0, bits - 1));
  return (t >= -half - Scalar(0.5) && t <= half - Scalar(0.5)) ? 1 : 0;
}

/// Straight-through pass mask for unsigned activations: the closed clipping
/// range [0, 2^m - 1] in units of delta.
template <typename Scalar>
int ste_activation_passmask(Scalar x, Scalar delta, int bits) {
  const Scalar t = x / delta;
  return (t >= Scalar(0) && t <= Scalar(unsigned_code_max(bits))) ? 1 : 0;
}

/// Discontinuities of the signed quantizer: ((2i + 1 - 2^n) / 2) * delta for
/// i = 0 .. 2^n - 2, or {0} for n = 1.
template <typename Scalar>
CellBoundaries<Scalar> cell_boundaries(Scalar delta, int bits) {
  detail::check_scale(delta);
  detail::check_bits(bits);
  CellBoundaries<Scalar> out;
  if (bits == 1) {
    out.points.push_back(Scalar(0));
    return out;
  }
  const long long levels = 1LL << bits;
  out.points.reserve(static_cast<std::size_t>(levels - 1));
  for (long long i = 0; i <= levels - 2; ++i) {
    out.points.push_back(Scalar(2 * i + 1 - levels) / Scalar(2) * delta);
  }
  return out;
}

/// True when w sits exactly on a signed cell boundary.
template <typename Scalar>
bool on_signed_boundary(Scalar w, Scalar delta, int bits) {
  if (bits == 1) return w == Scalar(0);
  const Scalar t = w / delta;
  if (t - std::floor(t) != Scalar(0.5)) return false;
  const Scalar lo = Scalar(signed_code_min(bits)) + Scalar(0.5);
  const Scalar hi = Scalar(signed_code_max(bits)) - Scalar(0.5);
  return t >= lo && t <= hi;
}

/// True when x sits exactly on an unsigned cell boundary (k + 1/2) * delta,
/// k = 0 .. 2^m - 2.
template <typename Scalar>
bool on_unsigned_boundary(Scalar x, Scalar delta, int bits) {
  const Scalar t = x / delta;
  if (t - std::floor(t) != Scalar(0.5)) return false;
  return t >= Scalar(0.5) && t <= Scalar(unsigned_code_max(bits)) - Scalar(0.5);
}

/// Nearest power of two; the boundary between 2^k and 2^(k+1) is 3 * 2^(k-1)
/// and a value exactly on it goes to the larger power.
template <typename Scalar>
Scalar round_pow2(Scalar x) {
  if (!(x > Scalar(0))) throw std::invalid_argument("round_pow2 needs a positive value");
  int exp = 0;
  const Scalar frac = std::frexp(x, &exp);  // x = frac * 2^exp, frac in [0.5, 1)
  return frac >= Scalar(0.75) ? std::ldexp(Scalar(1), exp) : std::ldexp(Scalar(1), exp - 1);
}

template <typename Scalar>
bool on_pow2_boundary(Scalar x) {
  if (!(x > Scalar(0))) return false;
  int exp = 0;
  return std::frexp(x, &exp) == Scalar(0.75);
}

template <typename Scalar>
bool is_pow2(Scalar x) {
  if (!(x > Scalar(0))) return false;
  int exp = 0;
  return std::frexp(x, &exp) == Scalar(0.5);
}

// Element-wise forms over Eigen arrays.

template <typename Derived>
auto quantize_signed(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar delta, int bits) {
  using Scalar = typename Derived::Scalar;
  detail::check_scale(delta);
  detail::check_bits(bits);
  return x.unaryExpr([delta, bits](Scalar v) { return delta * signed_code(v, delta, bits); });
}

template <typename Derived>
auto quantize_unsigned(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar delta, int bits) {
  using Scalar = typename Derived::Scalar;
  detail::check_scale(delta);
  detail::check_bits(bits);
  return x.unaryExpr([delta, bits](Scalar v) { return delta * unsigned_code(v, delta, bits); });
}

template <typename Derived>
auto ste_weight_passmask(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar delta, int bits) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([delta, bits](Scalar v) { return Scalar(ste_weight_passmask(v, delta, bits)); });
}

template <typename Derived>
auto ste_activation_passmask(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar delta, int bits) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([delta, bits](Scalar v) { return Scalar(ste_activation_passmask(v, delta, bits)); });
}

}  // namespace qatforge
