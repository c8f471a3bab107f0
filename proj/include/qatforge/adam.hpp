#pragma once

#include <Eigen/Core>

#include <cmath>

namespace qatforge {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment state for one parameter group.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, AdamConfig config = {})
      : config_(config), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}

  template <typename Param, typename Grad>
  void step(Param&& param, const Grad& grad, double lr) {
    ++t_;
    m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
    v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    param.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.epsilon);
  }

  long steps() const { return t_; }

 private:
  AdamConfig config_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long t_ = 0;
};

/// Adam on a single scalar parameter.
class ScalarAdam {
 public:
  explicit ScalarAdam(AdamConfig config = {}) : config_(config) {}

  void step(double& param, double grad, double lr) {
    ++t_;
    m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
    v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad * grad;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    param -= lr * (m_ / c1) / (std::sqrt(v_ / c2) + config_.epsilon);
  }

 private:
  AdamConfig config_;
  double m_ = 0.0;
  double v_ = 0.0;
  long t_ = 0;
};

}  // namespace qatforge
