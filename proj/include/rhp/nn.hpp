#pragma once

#include <cmath>
#include <vector>

#include "rhp/tensor.hpp"

// Layer kernels for the small classifiers. Each forward keeps whatever its
// backward needs in a plain cache struct owned by the caller.

namespace rhp::nn {

/// Unfolds a 3x3, stride-1, zero-padded neighbourhood: rows (ci, ky, kx), cols h*W + w.
template <typename Scalar>
void im2col3x3(const Scalar* src, Index channels, Index height, Index width,
               RowMatrix<Scalar>& cols) {
  const Index hw = height * width;
  cols.resize(channels * 9, hw);
  for (Index ci = 0; ci < channels; ++ci) {
    const Scalar* plane = src + ci * hw;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        Scalar* row = cols.data() + (ci * 9 + ky * 3 + kx) * hw;
        for (Index h = 0; h < height; ++h) {
          const Index sh = h + ky - 1;
          for (Index w = 0; w < width; ++w) {
            const Index sw = w + kx - 1;
            row[h * width + w] = (sh >= 0 && sh < height && sw >= 0 && sw < width)
                                     ? plane[sh * width + sw]
                                     : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im3x3_add(const RowMatrix<Scalar>& cols, Index channels, Index height, Index width,
                   Scalar* dst) {
  const Index hw = height * width;
  for (Index ci = 0; ci < channels; ++ci) {
    Scalar* plane = dst + ci * hw;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Scalar* row = cols.data() + (ci * 9 + ky * 3 + kx) * hw;
        for (Index h = 0; h < height; ++h) {
          const Index sh = h + ky - 1;
          if (sh < 0 || sh >= height) continue;
          for (Index w = 0; w < width; ++w) {
            const Index sw = w + kx - 1;
            if (sw >= 0 && sw < width) plane[sh * width + sw] += row[h * width + w];
          }
        }
      }
    }
  }
}

template <typename Scalar>
struct ConvCache {
  std::vector<RowMatrix<Scalar>> cols;  // one per image
  Shape input;
};

/// 3x3 "same" convolution. `weight` is (Cout, Cin*9), `bias` has Cout entries.
template <typename Scalar, typename W, typename B>
Tensor<Scalar> conv3x3_forward(const Tensor<Scalar>& x, const Eigen::MatrixBase<W>& weight,
                               const Eigen::MatrixBase<B>& bias, ConvCache<Scalar>* cache) {
  const Index cout = weight.rows();
  if (weight.cols() != x.c() * 9) throw ShapeError("conv3x3: weight/input channel mismatch");
  Tensor<Scalar> out(Shape{x.n(), cout, x.h(), x.w()});
  RowMatrix<Scalar> local;
  if (cache) {
    cache->cols.resize(x.n());
    cache->input = x.shape();
  }
  for (Index n = 0; n < x.n(); ++n) {
    RowMatrix<Scalar>& cols = cache ? cache->cols[n] : local;
    im2col3x3(x.data() + n * x.shape().image_size(), x.c(), x.h(), x.w(), cols);
    auto o = out.plane(n);
    o.noalias() = weight * cols;
    o.colwise() += bias;
  }
  return out;
}

/// Accumulates weight/bias gradients (when `param_grads`) and writes the input gradient
/// if requested.
template <typename Scalar, typename W, typename GW, typename GB>
void conv3x3_backward(const Tensor<Scalar>& grad_out, const ConvCache<Scalar>& cache,
                      const Eigen::MatrixBase<W>& weight, Eigen::MatrixBase<GW>&& grad_weight,
                      Eigen::MatrixBase<GB>&& grad_bias, bool param_grads,
                      Tensor<Scalar>* grad_in) {
  if (grad_in) *grad_in = Tensor<Scalar>(cache.input);
  RowMatrix<Scalar> dcols;
  for (Index n = 0; n < grad_out.n(); ++n) {
    const auto go = grad_out.plane(n);
    if (param_grads) {
      grad_weight.noalias() += go * cache.cols[n].transpose();
      grad_bias += go.rowwise().sum();
    }
    if (grad_in) {
      dcols.noalias() = weight.transpose() * go;
      col2im3x3_add(dcols, cache.input.c, cache.input.h, cache.input.w,
                    grad_in->data() + n * cache.input.image_size());
    }
  }
}

template <typename Scalar>
void relu_inplace(Tensor<Scalar>& x) {
  x.array() = x.array().max(Scalar(0));
}

/// Gradient through ReLU given the forward output.
template <typename Scalar>
void relu_backward_inplace(Tensor<Scalar>& grad, const Tensor<Scalar>& out) {
  grad.array() = (out.array() > Scalar(0)).select(grad.array(), Scalar(0));
}

struct PoolCache {
  std::vector<Index> argmax;  // flat input offset for each output element
  Shape input;
};

/// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
template <typename Scalar>
Tensor<Scalar> maxpool2_forward(const Tensor<Scalar>& x, PoolCache* cache) {
  const Index oh = x.h() / 2, ow = x.w() / 2;
  Tensor<Scalar> out(Shape{x.n(), x.c(), oh, ow});
  if (cache) {
    cache->argmax.resize(out.size());
    cache->input = x.shape();
  }
  Index o = 0;
  for (Index n = 0; n < x.n(); ++n) {
    for (Index c = 0; c < x.c(); ++c) {
      for (Index h = 0; h < oh; ++h) {
        for (Index w = 0; w < ow; ++w, ++o) {
          Index best = x.offset(n, c, 2 * h, 2 * w);
          for (Index dy = 0; dy < 2; ++dy) {
            for (Index dx = 0; dx < 2; ++dx) {
              const Index idx = x.offset(n, c, 2 * h + dy, 2 * w + dx);
              if (x.data()[idx] > x.data()[best]) best = idx;
            }
          }
          out.data()[o] = x.data()[best];
          if (cache) cache->argmax[o] = best;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> maxpool2_backward(const Tensor<Scalar>& grad_out, const PoolCache& cache) {
  Tensor<Scalar> grad_in(cache.input);
  for (Index o = 0; o < grad_out.size(); ++o) grad_in.data()[cache.argmax[o]] += grad_out.data()[o];
  return grad_in;
}

/// Global average pooling to an (N, C) matrix.
template <typename Scalar>
RowMatrix<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  RowMatrix<Scalar> out(x.n(), x.c());
  for (Index n = 0; n < x.n(); ++n) out.row(n) = x.plane(n).rowwise().mean().transpose();
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const RowMatrix<Scalar>& grad, const Shape& input) {
  Tensor<Scalar> g(input);
  const Scalar inv = Scalar(1) / Scalar(input.h * input.w);
  for (Index n = 0; n < input.n; ++n) {
    g.plane(n).colwise() = grad.row(n).transpose() * inv;
  }
  return g;
}

template <typename Scalar>
struct CrossEntropy {
  Vector<Scalar> per_sample;
  RowMatrix<Scalar> grad_logits;
  Scalar mean = Scalar(0);
};

/// Softmax cross-entropy. Returns per-sample losses, their mean, and the logit gradient
/// of the mean loss (or of the summed loss when `mean_gradient` is false).
template <typename Scalar>
CrossEntropy<Scalar> cross_entropy(const RowMatrix<Scalar>& logits, const std::vector<int>& labels,
                                   bool mean_gradient = true) {
  const Index n = logits.rows();
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count");
  CrossEntropy<Scalar> ce;
  ce.per_sample.resize(n);
  ce.grad_logits.resize(n, logits.cols());
  for (Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= logits.cols()) throw std::out_of_range("label out of range");
    const Scalar m = logits.row(i).maxCoeff();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
    const Scalar z = e.sum();
    ce.per_sample[i] = std::log(z) + m - logits(i, labels[i]);
    ce.grad_logits.row(i) = e / z;
    ce.grad_logits(i, labels[i]) -= Scalar(1);
  }
  ce.mean = n > 0 ? ce.per_sample.mean() : Scalar(0);
  if (n > 0 && mean_gradient) ce.grad_logits /= Scalar(n);
  return ce;
}

}  // namespace rhp::nn
