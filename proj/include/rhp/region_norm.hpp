#pragma once

#include <cmath>
#include <type_traits>
#include <vector>

#include "rhp/region_partition.hpp"
#include "rhp/tensor.hpp"

namespace rhp {

/// Trainable and tracked state of a Region Norm layer bound to a K-region partition.
template <typename Scalar>
struct RNState {
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
  Vector<Scalar> moving_mean;
  Vector<Scalar> moving_var;
  Scalar momentum = Scalar(0.1);
  Scalar stab_const = Scalar(1e-5);

  /// gamma = beta = 0, moving statistics at (0, 1).
  static RNState zeros(int k_regions) {
    RNState s;
    s.gamma = Vector<Scalar>::Zero(k_regions);
    s.beta = Vector<Scalar>::Zero(k_regions);
    s.moving_mean = Vector<Scalar>::Zero(k_regions);
    s.moving_var = Vector<Scalar>::Ones(k_regions);
    return s;
  }

  int k_regions() const { return static_cast<int>(gamma.size()); }

  template <typename Other>
  RNState<Other> cast() const {
    RNState<Other> out;
    out.gamma = gamma.template cast<Other>();
    out.beta = beta.template cast<Other>();
    out.moving_mean = moving_mean.template cast<Other>();
    out.moving_var = moving_var.template cast<Other>();
    out.momentum = static_cast<Other>(momentum);
    out.stab_const = static_cast<Other>(stab_const);
    return out;
  }
};

/// Values kept by the training-mode forward pass for the backward pass.
template <typename Scalar>
struct RNCache {
  Tensor<Scalar> x_hat;
  Vector<Scalar> sigma;
  std::vector<Index> counts;  // m_k = N * C * |P_k|
  const RegionPartition* partition = nullptr;
};

template <typename Scalar>
struct RNGrads {
  Tensor<Scalar> grad_x;
  Vector<Scalar> grad_gamma;
  Vector<Scalar> grad_beta;
};

namespace detail {

template <typename Scalar>
using Accum = std::common_type_t<Scalar, double>;

template <typename Scalar>
void check_rn_inputs(const Tensor<Scalar>& x, const RegionPartition& partition,
                     const RNState<Scalar>& state) {
  if (x.h() != partition.height() || x.w() != partition.width()) {
    throw ShapeError("region norm: input spatial size " + std::to_string(x.h()) + "x" +
                     std::to_string(x.w()) + " does not match partition");
  }
  if (state.k_regions() != partition.k_regions() || state.beta.size() != state.gamma.size() ||
      state.moving_mean.size() != state.gamma.size() ||
      state.moving_var.size() != state.gamma.size()) {
    throw ShapeError("region norm: state length does not match partition K");
  }
}

}  // namespace detail

/// Training-mode Region Norm. Statistics of region k span batch, channel and the
/// region's pixels. Updates the moving statistics in `state`.
template <typename Scalar>
Tensor<Scalar> rn_forward_train(const Tensor<Scalar>& x, const RegionPartition& partition,
                                RNState<Scalar>& state, RNCache<Scalar>* cache = nullptr) {
  using Acc = detail::Accum<Scalar>;
  detail::check_rn_inputs(x, partition, state);
  if (!x.all_finite()) throw NonFiniteError("region norm: non-finite input");

  const int K = partition.k_regions();
  const Index hw = partition.pixel_count();
  const auto& labels = partition.label_map();

  std::vector<Acc> sum(K, Acc(0));
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* row = x.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) sum[labels[p]] += row[p];
  }
  std::vector<Index> counts(K);
  std::vector<Acc> mean(K);
  for (int k = 0; k < K; ++k) {
    counts[k] = x.n() * x.c() * partition.region_sizes()[k];
    mean[k] = sum[k] / Acc(counts[k]);
  }
  std::vector<Acc> sq(K, Acc(0));
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* row = x.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) {
      const Acc d = Acc(row[p]) - mean[labels[p]];
      sq[labels[p]] += d * d;
    }
  }

  Vector<Scalar> sigma(K);
  std::vector<Acc> inv_sigma(K);
  for (int k = 0; k < K; ++k) {
    const Acc var = sq[k] / Acc(counts[k]);
    const Acc s = std::sqrt(var + Acc(state.stab_const));
    sigma[k] = Scalar(s);
    inv_sigma[k] = Acc(1) / s;
    state.moving_mean[k] = Scalar((Acc(1) - state.momentum) * state.moving_mean[k] +
                                  Acc(state.momentum) * mean[k]);
    state.moving_var[k] =
        Scalar((Acc(1) - state.momentum) * state.moving_var[k] + Acc(state.momentum) * var);
  }

  Tensor<Scalar> y(x.shape());
  Tensor<Scalar> x_hat(x.shape());
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* in = x.data() + nc * hw;
    Scalar* xh = x_hat.data() + nc * hw;
    Scalar* out = y.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) {
      const int k = labels[p];
      xh[p] = Scalar((Acc(in[p]) - mean[k]) * inv_sigma[k]);
      out[p] = state.gamma[k] * xh[p] + state.beta[k];
    }
  }

  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->sigma = std::move(sigma);
    cache->counts = std::move(counts);
    cache->partition = &partition;
  }
  return y;
}

/// Inference-mode Region Norm using the moving statistics. Does not mutate state.
template <typename Scalar>
Tensor<Scalar> rn_forward_eval(const Tensor<Scalar>& x, const RegionPartition& partition,
                               const RNState<Scalar>& state) {
  detail::check_rn_inputs(x, partition, state);
  const int K = partition.k_regions();
  const Index hw = partition.pixel_count();
  const auto& labels = partition.label_map();

  Vector<Scalar> scale(K), shift(K);
  for (int k = 0; k < K; ++k) {
    scale[k] = state.gamma[k] / std::sqrt(state.moving_var[k] + state.stab_const);
    shift[k] = state.beta[k] - scale[k] * state.moving_mean[k];
  }
  Tensor<Scalar> y(x.shape());
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* in = x.data() + nc * hw;
    Scalar* out = y.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) out[p] = scale[labels[p]] * in[p] + shift[labels[p]];
  }
  return y;
}

/// Analytic backward pass of the training-mode forward.
template <typename Scalar>
RNGrads<Scalar> rn_backward(const Tensor<Scalar>& grad_y, const RNCache<Scalar>& cache,
                            const RNState<Scalar>& state) {
  using Acc = detail::Accum<Scalar>;
  if (cache.partition == nullptr) throw ShapeError("region norm backward: empty cache");
  require_shape(grad_y, cache.x_hat.shape(), "region norm backward");
  const RegionPartition& partition = *cache.partition;
  if (state.k_regions() != partition.k_regions()) {
    throw ShapeError("region norm backward: state does not match cached partition");
  }

  const int K = partition.k_regions();
  const Index hw = partition.pixel_count();
  const Index planes = grad_y.n() * grad_y.c();
  const auto& labels = partition.label_map();

  std::vector<Acc> sum_dy(K, Acc(0)), sum_dy_xhat(K, Acc(0));
  for (Index nc = 0; nc < planes; ++nc) {
    const Scalar* dy = grad_y.data() + nc * hw;
    const Scalar* xh = cache.x_hat.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) {
      sum_dy[labels[p]] += dy[p];
      sum_dy_xhat[labels[p]] += Acc(dy[p]) * xh[p];
    }
  }

  RNGrads<Scalar> out;
  out.grad_gamma.resize(K);
  out.grad_beta.resize(K);
  // With dL/dx_hat = gamma * dy, the shared region terms are gamma times the sums above.
  std::vector<Acc> coef(K), term_mean(K), term_var(K);
  for (int k = 0; k < K; ++k) {
    out.grad_beta[k] = Scalar(sum_dy[k]);
    out.grad_gamma[k] = Scalar(sum_dy_xhat[k]);
    const Acc m = Acc(cache.counts[k]);
    coef[k] = Acc(state.gamma[k]) / (m * Acc(cache.sigma[k]));
    term_mean[k] = sum_dy[k];
    term_var[k] = sum_dy_xhat[k];
  }

  out.grad_x = Tensor<Scalar>(grad_y.shape());
  for (Index nc = 0; nc < planes; ++nc) {
    const Scalar* dy = grad_y.data() + nc * hw;
    const Scalar* xh = cache.x_hat.data() + nc * hw;
    Scalar* dx = out.grad_x.data() + nc * hw;
    for (Index p = 0; p < hw; ++p) {
      const int k = labels[p];
      const Acc m = Acc(cache.counts[k]);
      dx[p] = Scalar(coef[k] * (m * Acc(dy[p]) - term_mean[k] - Acc(xh[p]) * term_var[k]));
    }
  }
  return out;
}

}  // namespace rhp
