#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "rhp/tensor.hpp"

namespace rhp {

/// Bilinear downscale of an H x W plane to `size` x `size`, placed at (top, left) of a
/// zero H x W canvas. Linear in the input, so the adjoint gives exact input gradients.
class ResizePadOp {
 public:
  ResizePadOp(Index height, Index width, Index size, Index top, Index left)
      : height_(height), width_(width), size_(size), top_(top), left_(left) {
    if (size < 1 || size > height || size > width || top < 0 || left < 0 ||
        top + size > height || left + size > width) {
      throw ShapeError("resize/pad: target placement outside the canvas");
    }
    for (Index i = 0; i < size; ++i) {
      const auto [y0, y1, wy] = taps(i, height);
      for (Index j = 0; j < size; ++j) {
        const auto [x0, x1, wx] = taps(j, width);
        const Index dst = (top + i) * width + (left + j);
        add(dst, y0 * width + x0, (1 - wy) * (1 - wx));
        add(dst, y0 * width + x1, (1 - wy) * wx);
        add(dst, y1 * width + x0, wy * (1 - wx));
        add(dst, y1 * width + x1, wy * wx);
      }
    }
  }

  bool is_identity() const { return size_ == height_ && size_ == width_; }
  Index size() const { return size_; }

  template <typename Scalar>
  Tensor<Scalar> apply(const Tensor<Scalar>& x) const {
    if (is_identity()) return x;
    check(x);
    Tensor<Scalar> out(x.shape());
    const Index hw = height_ * width_;
    for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
      const Scalar* in = x.data() + nc * hw;
      Scalar* o = out.data() + nc * hw;
      for (std::size_t e = 0; e < dst_.size(); ++e) o[dst_[e]] += Scalar(weight_[e]) * in[src_[e]];
    }
    return out;
  }

  template <typename Scalar>
  Tensor<Scalar> adjoint(const Tensor<Scalar>& g) const {
    if (is_identity()) return g;
    check(g);
    Tensor<Scalar> out(g.shape());
    const Index hw = height_ * width_;
    for (Index nc = 0; nc < g.n() * g.c(); ++nc) {
      const Scalar* in = g.data() + nc * hw;
      Scalar* o = out.data() + nc * hw;
      for (std::size_t e = 0; e < dst_.size(); ++e) o[src_[e]] += Scalar(weight_[e]) * in[dst_[e]];
    }
    return out;
  }

 private:
  struct Taps {
    Index lo, hi;
    double frac;
  };

  Taps taps(Index i, Index extent) const {
    const double s = (i + 0.5) * double(extent) / double(size_) - 0.5;
    const double c = std::clamp(s, 0.0, double(extent - 1));
    const Index lo = static_cast<Index>(std::floor(c));
    const Index hi = std::min(lo + 1, extent - 1);
    return {lo, hi, c - double(lo)};
  }

  void add(Index dst, Index src, double w) {
    if (w == 0.0) return;
    dst_.push_back(dst);
    src_.push_back(src);
    weight_.push_back(w);
  }

  template <typename Scalar>
  void check(const Tensor<Scalar>& x) const {
    if (x.h() != height_ || x.w() != width_) throw ShapeError("resize/pad: input size mismatch");
  }

  Index height_, width_, size_, top_, left_;
  std::vector<Index> dst_, src_;
  std::vector<double> weight_;
};

struct ResizeRange {
  double lo = 0.9;
  double hi = 1.0;
};

/// Draws one random resize-and-pad placement: scale factor uniform in `range`,
/// offset uniform over the valid positions.
inline ResizePadOp draw_resize_pad(Index height, Index width, ResizeRange range,
                                   std::mt19937_64& rng) {
  std::uniform_real_distribution<double> factor(range.lo, range.hi);
  const Index extent = std::min(height, width);
  const Index size =
      std::clamp<Index>(static_cast<Index>(std::lround(factor(rng) * double(extent))), 1, extent);
  std::uniform_int_distribution<Index> top(0, height - size);
  std::uniform_int_distribution<Index> left(0, width - size);
  const Index t = top(rng);
  const Index l = left(rng);
  return ResizePadOp(height, width, size, t, l);
}

}  // namespace rhp
