#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qatforge {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array with an optional gradient buffer of
/// the same shape.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// View the buffer as a row-major matrix; rows * cols must equal size().
  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(data_.size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() { grad() = Vector::Zero(data_.size()); }
  void drop_grad() { grad_.reset(); }

  /// Same data under a new shape of equal element count; the gradient is not carried.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor shape must be positive: " + shape_string(shape));
    }
  }
  void check_view(Index rows, Index cols) const {
    if (rows * cols != data_.size()) {
      throw std::invalid_argument("cannot view tensor " + shape_string(shape_) + " as " +
                                  std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  Shape shape_;
  Vector data_;
  std::optional<Vector> grad_;
};

using TensorD = Tensor<double>;
using IntTensor = Tensor<std::int32_t>;

}  // namespace qatforge
