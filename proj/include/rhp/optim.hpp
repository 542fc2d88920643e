#pragma once

#include <cmath>

#include "rhp/tensor.hpp"

namespace rhp {

/// Adam (Kingma & Ba) over a flat parameter vector. `step` descends; pass the negated
/// gradient to ascend.
template <typename Scalar>
class Adam {
 public:
  Adam(Index size, double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(learning_rate),
        b1_(beta1),
        b2_(beta2),
        eps_(eps),
        m_(Vector<double>::Zero(size)),
        v_(Vector<double>::Zero(size)) {}

  void step(Vector<Scalar>& theta, const Vector<Scalar>& grad) {
    if (grad.size() != m_.size() || theta.size() != m_.size()) {
      throw ShapeError("adam: parameter/gradient size mismatch");
    }
    ++t_;
    const Vector<double> g = grad.template cast<double>();
    m_ = b1_ * m_ + (1.0 - b1_) * g;
    v_ = b2_ * v_ + (1.0 - b2_) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    const Vector<double> update =
        (lr_ / c1) * m_.array() / ((v_.array() / c2).sqrt() + eps_);
    theta -= update.template cast<Scalar>();
  }

  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  Vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace rhp
