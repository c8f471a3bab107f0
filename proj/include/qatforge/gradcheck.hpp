#pragma once

#include "qatforge/tensor.hpp"

#include <stdexcept>

namespace qatforge {

/// Central-difference gradient (f(x+h) - f(x-h)) / 2h of a scalar function,
/// one coordinate at a time. x is restored before returning.
template <typename Scalar, typename Fn>
Tensor<Scalar> finite_difference(Fn&& f, Tensor<Scalar>& x, Scalar h) {
  if (!(h > Scalar(0))) throw std::invalid_argument("finite-difference step must be positive");
  Tensor<Scalar> grad(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar saved = x[i];
    x[i] = saved + h;
    const Scalar up = f(x);
    x[i] = saved - h;
    const Scalar down = f(x);
    x[i] = saved;
    grad[i] = (up - down) / (Scalar(2) * h);
  }
  return grad;
}

/// Scalar overload.
template <typename Scalar, typename Fn>
Scalar finite_difference(Fn&& f, Scalar x, Scalar h) {
  if (!(h > Scalar(0))) throw std::invalid_argument("finite-difference step must be positive");
  return (f(x + h) - f(x - h)) / (Scalar(2) * h);
}

}  // namespace qatforge
