#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rhp {

using Index = Eigen::Index;

/// Floating type used by the persisted pipeline (checkpoints, artifacts, CLI).
using Real = float;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return n * c * h * w; }
  Index image_size() const { return c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or infinity reaches a computation that requires finite values.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense N x C x H x W tensor, row-major (w fastest), backed by an Eigen array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Array::Zero(shape.size())) {}
  Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(shape);
    t.data_.setConstant(v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return shape_.size(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  /// Flat view of image `n` (C*H*W values).
  Eigen::Map<Array> image(Index n) {
    return Eigen::Map<Array>(data_.data() + n * shape_.image_size(), shape_.image_size());
  }
  Eigen::Map<const Array> image(Index n) const {
    return Eigen::Map<const Array>(data_.data() + n * shape_.image_size(), shape_.image_size());
  }

  /// (C, H*W) row-major matrix view of image `n`.
  Eigen::Map<RowMatrix<Scalar>> plane(Index n) {
    return Eigen::Map<RowMatrix<Scalar>>(data_.data() + n * shape_.image_size(), shape_.c,
                                         shape_.h * shape_.w);
  }
  Eigen::Map<const RowMatrix<Scalar>> plane(Index n) const {
    return Eigen::Map<const RowMatrix<Scalar>>(data_.data() + n * shape_.image_size(), shape_.c,
                                               shape_.h * shape_.w);
  }

  Tensor slice(Index first, Index count) const {
    Tensor out(Shape{count, shape_.c, shape_.h, shape_.w});
    out.data_ = data_.segment(first * shape_.image_size(), count * shape_.image_size());
    return out;
  }

  bool all_finite() const { return data_.isFinite().all(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Shape shape_;
  Array data_;
};

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + expected.str() + ", got " +
                     t.shape().str());
  }
}

/// Elementwise sign with sign(0) = +1.
template <typename Derived>
auto sign_nonzero(const Eigen::ArrayBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return v >= Scalar(0) ? Scalar(1) : Scalar(-1); });
}

/// Stacks single images (each 1 x C x H x W) into one batch.
template <typename Scalar, typename Range>
Tensor<Scalar> stack(const Range& images) {
  Index count = 0;
  Shape s{};
  for (const auto& img : images) {
    if (count == 0) s = img.shape();
    ++count;
  }
  Tensor<Scalar> out(Shape{count, s.c, s.h, s.w});
  Index i = 0;
  for (const auto& img : images) {
    require_shape(img, Shape{1, s.c, s.h, s.w}, "stack");
    out.image(i++) = img.image(0);
  }
  return out;
}

}  // namespace rhp
