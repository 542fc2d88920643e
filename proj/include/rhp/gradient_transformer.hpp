#pragma once

#include <memory>
#include <random>

#include "rhp/perturbation.hpp"
#include "rhp/region_norm.hpp"

namespace rhp {

enum class Mode { train, eval };

/// Parameters of the gradient transformer T(g) = RN(conv1x1(g)) + g.
template <typename Scalar>
struct TransformerParams {
  RowMatrix<Scalar> conv_weight;  // C x C
  Vector<Scalar> conv_bias;       // C
  RNState<Scalar> rn;
  RegionSplitSpec split;
  std::shared_ptr<const RegionPartition> partition;
  /// Factor applied to per-image loss gradients before they enter the module. Training
  /// sets 1 / batch size, making the input the gradient of the batch-mean loss; attacks
  /// reuse it so eval-mode statistics see the same scale.
  Scalar input_scale = Scalar(1);

  Index channels() const { return conv_bias.size(); }
  int k_regions() const { return rn.k_regions(); }

  /// Trainable scalar count: C^2 + C + 2K. Moving statistics are not counted.
  Index parameter_count() const {
    return conv_weight.size() + conv_bias.size() + rn.gamma.size() + rn.beta.size();
  }

  /// Trainable parameters packed as [weight (row-major), bias, gamma, beta].
  Vector<Scalar> pack() const {
    Vector<Scalar> theta(parameter_count());
    Index o = 0;
    for (Index i = 0; i < conv_weight.rows(); ++i)
      for (Index j = 0; j < conv_weight.cols(); ++j) theta[o++] = conv_weight(i, j);
    theta.segment(o, conv_bias.size()) = conv_bias;
    o += conv_bias.size();
    theta.segment(o, rn.gamma.size()) = rn.gamma;
    o += rn.gamma.size();
    theta.segment(o, rn.beta.size()) = rn.beta;
    return theta;
  }

  void unpack(const Vector<Scalar>& theta) {
    if (theta.size() != parameter_count()) throw ShapeError("transformer: packed size mismatch");
    Index o = 0;
    for (Index i = 0; i < conv_weight.rows(); ++i)
      for (Index j = 0; j < conv_weight.cols(); ++j) conv_weight(i, j) = theta[o++];
    conv_bias = theta.segment(o, conv_bias.size());
    o += conv_bias.size();
    rn.gamma = theta.segment(o, rn.gamma.size());
    o += rn.gamma.size();
    rn.beta = theta.segment(o, rn.beta.size());
  }

  template <typename Other>
  TransformerParams<Other> cast() const {
    TransformerParams<Other> out;
    out.conv_weight = conv_weight.template cast<Other>();
    out.conv_bias = conv_bias.template cast<Other>();
    out.rn = rn.template cast<Other>();
    out.split = split;
    out.partition = partition;
    out.input_scale = static_cast<Other>(input_scale);
    return out;
  }
};

/// Tensors tapped at the module input (a), conv output (b), RN output (c) and the
/// identity branch (d).
template <typename Scalar>
struct ProbeRecord {
  Tensor<Scalar> a;
  Tensor<Scalar> b;
  Tensor<Scalar> c;
  Tensor<Scalar> d;
};

template <typename Scalar>
struct TransformCache {
  Tensor<Scalar> input;
  RNCache<Scalar> rn;
  Mode mode = Mode::eval;
};

template <typename Scalar>
struct TransformResult {
  Tensor<Scalar> g_hat;
  ProbeRecord<Scalar> probes;
  TransformCache<Scalar> cache;
};

template <typename Scalar>
struct TransformerGrads {
  RowMatrix<Scalar> conv_weight;
  Vector<Scalar> conv_bias;
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
  Tensor<Scalar> input;

  /// Same layout as TransformerParams::pack().
  Vector<Scalar> pack() const {
    Vector<Scalar> v(conv_weight.size() + conv_bias.size() + gamma.size() + beta.size());
    Index o = 0;
    for (Index i = 0; i < conv_weight.rows(); ++i)
      for (Index j = 0; j < conv_weight.cols(); ++j) v[o++] = conv_weight(i, j);
    v.segment(o, conv_bias.size()) = conv_bias;
    o += conv_bias.size();
    v.segment(o, gamma.size()) = gamma;
    o += gamma.size();
    v.segment(o, beta.size()) = beta;
    return v;
  }
};

/// Fresh module: conv weight ~ N(0, 0.01^2), zero bias, gamma = beta = 0, so T(g) = g.
template <typename Scalar>
TransformerParams<Scalar> init_transformer(Index channels,
                                           std::shared_ptr<const RegionPartition> partition,
                                           std::uint64_t seed,
                                           const RegionSplitSpec& split = {}) {
  if (channels < 1) throw std::invalid_argument("transformer needs at least one channel");
  if (!partition) throw std::invalid_argument("transformer needs a partition");
  TransformerParams<Scalar> p;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.01);
  p.conv_weight.resize(channels, channels);
  for (Index i = 0; i < channels; ++i)
    for (Index j = 0; j < channels; ++j) p.conv_weight(i, j) = static_cast<Scalar>(normal(rng));
  p.conv_bias = Vector<Scalar>::Zero(channels);
  p.rn = RNState<Scalar>::zeros(partition->k_regions());
  p.split = split;
  p.partition = std::move(partition);
  return p;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> conv1x1(const Tensor<Scalar>& g, const TransformerParams<Scalar>& params) {
  Tensor<Scalar> out(g.shape());
  for (Index n = 0; n < g.n(); ++n) {
    out.plane(n) = params.conv_weight * g.plane(n);
    out.plane(n).colwise() += params.conv_bias;
  }
  return out;
}

}  // namespace detail

/// T(g) = RN(conv(g)) + g. Train mode updates the moving statistics of `params.rn`.
template <typename Scalar>
TransformResult<Scalar> transform(const Tensor<Scalar>& g, TransformerParams<Scalar>& params,
                                  Mode mode) {
  if (g.c() != params.channels()) throw ShapeError("transform: channel mismatch");
  if (!g.all_finite()) throw NonFiniteError("transform: non-finite input");

  TransformResult<Scalar> r;
  Tensor<Scalar> b = detail::conv1x1(g, params);
  Tensor<Scalar> c = mode == Mode::train
                         ? rn_forward_train(b, *params.partition, params.rn, &r.cache.rn)
                         : rn_forward_eval(b, *params.partition, params.rn);
  r.g_hat = Tensor<Scalar>(g.shape());
  r.g_hat.array() = c.array() + g.array();
  r.probes.a = g;
  r.probes.b = std::move(b);
  r.probes.c = std::move(c);
  r.probes.d = g;
  r.cache.input = g;
  r.cache.mode = mode;
  return r;
}

/// Eval-mode T(g) without touching the moving statistics.
template <typename Scalar>
Tensor<Scalar> transform_eval(const Tensor<Scalar>& g, const TransformerParams<Scalar>& params) {
  if (g.c() != params.channels()) throw ShapeError("transform: channel mismatch");
  Tensor<Scalar> out = rn_forward_eval(detail::conv1x1(g, params), *params.partition, params.rn);
  out.array() += g.array();
  return out;
}

/// Backward pass of a train-mode transform.
template <typename Scalar>
TransformerGrads<Scalar> transform_backward(const Tensor<Scalar>& grad_out,
                                            const TransformCache<Scalar>& cache,
                                            const TransformerParams<Scalar>& params) {
  if (cache.mode != Mode::train) {
    throw std::logic_error("transform_backward needs a train-mode cache");
  }
  require_shape(grad_out, cache.input.shape(), "transform backward");
  RNGrads<Scalar> rn = rn_backward(grad_out, cache.rn, params.rn);

  TransformerGrads<Scalar> grads;
  grads.gamma = std::move(rn.grad_gamma);
  grads.beta = std::move(rn.grad_beta);
  grads.conv_weight = RowMatrix<Scalar>::Zero(params.channels(), params.channels());
  grads.conv_bias = Vector<Scalar>::Zero(params.channels());
  grads.input = grad_out;  // identity branch
  for (Index n = 0; n < grad_out.n(); ++n) {
    const auto db = rn.grad_x.plane(n);
    grads.conv_weight.noalias() += db * cache.input.plane(n).transpose();
    grads.conv_bias += db.rowwise().sum();
    grads.input.plane(n).noalias() += params.conv_weight.transpose() * db;
  }
  return grads;
}

/// u = eps * sign(T(0)) in eval mode, sign(0) = +1. `epsilon` is in 255-scale units.
template <typename Scalar>
PerturbationArtifact universal_perturbation(const TransformerParams<Scalar>& params,
                                            double epsilon, Index height, Index width) {
  const Tensor<Scalar> zero(Shape{1, params.channels(), height, width});
  const Tensor<Scalar> t = transform_eval(zero, params);
  PerturbationArtifact art;
  art.tensor = Tensor<Real>(t.shape());
  art.tensor.array() = (sign_nonzero(t.array()) * Scalar(epsilon / kPixelScale)).template cast<Real>();
  art.epsilon = epsilon;
  art.split = params.split;
  art.method = "rhp";
  return art;
}

struct ProbeFractions {
  double b_over_a = 0.0;
  double c_over_d = 0.0;
};

/// Fraction of elements with |b| > threshold * |a|, and likewise for (c, d).
template <typename Scalar>
ProbeFractions probe_fractions(const ProbeRecord<Scalar>& probes, double threshold = 10.0) {
  const auto frac = [threshold](const Tensor<Scalar>& big, const Tensor<Scalar>& small) {
    if (big.size() == 0) return 0.0;
    const auto hits =
        (big.array().abs().template cast<double>() > threshold * small.array().abs().template cast<double>())
            .count();
    return static_cast<double>(hits) / static_cast<double>(big.size());
  };
  return {frac(probes.b, probes.a), frac(probes.c, probes.d)};
}

}  // namespace rhp
