#pragma once

#include <random>
#include <string>

#include "rhp/gradient_transformer.hpp"
#include "rhp/model_zoo.hpp"
#include "rhp/perturbation.hpp"
#include "rhp/resample.hpp"

namespace rhp {

struct AttackConfig {
  double epsilon = 16.0;  // 255-scale
  int steps = 10;
  double momentum_decay = 1.0;
  double input_diversity_prob = 0.7;
  ResizeRange diversity_range{0.9, 1.0};
  std::uint64_t seed = 0;

  double radius() const { return epsilon / kPixelScale; }

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be non-negative");
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (input_diversity_prob < 0.0 || input_diversity_prob > 1.0) {
      throw std::invalid_argument("input_diversity_prob must lie in [0, 1]");
    }
  }
};

namespace detail {

template <typename Scalar>
void clip_unit(Tensor<Scalar>& x) {
  x.array() = x.array().max(Scalar(0)).min(Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> signed_step(const Tensor<Scalar>& images, const Tensor<Scalar>& direction,
                           double radius) {
  Tensor<Scalar> adv = images;
  adv.array() += Scalar(radius) * sign_nonzero(direction.array());
  clip_unit(adv);
  return adv;
}

}  // namespace detail

/// clip(I + eps * sign(grad L(I, y)), 0, 1).
template <typename Scalar>
Tensor<Scalar> fgsm(const ToyCnn<Scalar>& model, const Tensor<Scalar>& images,
                    const std::vector<int>& labels, const AttackConfig& cfg) {
  cfg.validate();
  return detail::signed_step(images, input_gradient(model, images, labels), cfg.radius());
}

/// T(s * grad L(I, y)) in eval mode with s = params.input_scale: the pre-sign RHP direction.
template <typename Scalar>
Tensor<Scalar> rhp_direction(const ToyCnn<Scalar>& model, const TransformerParams<Scalar>& params,
                             const Tensor<Scalar>& images, const std::vector<int>& labels) {
  Tensor<Scalar> g = input_gradient(model, images, labels);
  if (params.input_scale != Scalar(1)) g.array() *= params.input_scale;
  return transform_eval(g, params);
}

/// clip(I + eps * sign(T(grad L(I, y))), 0, 1) with T in eval mode.
template <typename Scalar>
Tensor<Scalar> rhp_attack(const ToyCnn<Scalar>& model, const TransformerParams<Scalar>& params,
                          const Tensor<Scalar>& images, const std::vector<int>& labels,
                          const AttackConfig& cfg) {
  cfg.validate();
  return detail::signed_step(images, rhp_direction(model, params, images, labels), cfg.radius());
}

/// clip(I + u, 0, 1) for every image in the batch.
template <typename Scalar>
Tensor<Scalar> apply_universal(const Tensor<Scalar>& images, const PerturbationArtifact& artifact) {
  const Shape& u = artifact.tensor.shape();
  if (u.c != images.c() || u.h != images.h() || u.w != images.w()) {
    throw ShapeError("universal perturbation " + u.str() + " does not fit images " +
                     images.shape().str());
  }
  const auto pert = artifact.tensor.image(0).template cast<Scalar>().eval();
  Tensor<Scalar> adv = images;
  for (Index n = 0; n < images.n(); ++n) adv.image(n) += pert;
  detail::clip_unit(adv);
  return adv;
}

namespace detail {

/// Shared loop of MIM and DIM. `diversity_prob` = 0 gives plain MIM.
template <typename Scalar>
Tensor<Scalar> momentum_iterative(const ToyCnn<Scalar>& model, const Tensor<Scalar>& images,
                                  const std::vector<int>& labels, const AttackConfig& cfg,
                                  double diversity_prob) {
  cfg.validate();
  const Scalar eps = Scalar(cfg.radius());
  const Scalar alpha = Scalar(cfg.radius() / cfg.steps);
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution diverse(diversity_prob);

  Tensor<Scalar> adv = images;
  Tensor<Scalar> velocity(images.shape());
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<Scalar> grad(images.shape());
    for (Index n = 0; n < images.n(); ++n) {
      Tensor<Scalar> x = adv.slice(n, 1);
      const std::vector<int> y{labels[n]};
      if (diverse(rng)) {
        const ResizePadOp op = draw_resize_pad(x.h(), x.w(), cfg.diversity_range, rng);
        grad.image(n) = op.adjoint(input_gradient(model, op.apply(x), y)).image(0);
      } else {
        grad.image(n) = input_gradient(model, x, y).image(0);
      }
    }
    for (Index n = 0; n < images.n(); ++n) {
      const Scalar l1 = grad.image(n).abs().mean();
      if (l1 > Scalar(0)) grad.image(n) /= l1;
      velocity.image(n) = Scalar(cfg.momentum_decay) * velocity.image(n) + grad.image(n);
    }
    adv.array() += alpha * sign_nonzero(velocity.array());
    adv.array() = adv.array().max(images.array() - eps).min(images.array() + eps);
    clip_unit(adv);
  }
  return adv;
}

}  // namespace detail

/// Momentum iterative FGSM: `steps` sign steps of eps/steps on the decayed,
/// L1-normalized gradient accumulator, projected to the eps-ball and [0, 1].
template <typename Scalar>
Tensor<Scalar> mim(const ToyCnn<Scalar>& model, const Tensor<Scalar>& images,
                   const std::vector<int>& labels, const AttackConfig& cfg) {
  return detail::momentum_iterative(model, images, labels, cfg, 0.0);
}

/// MIM with input diversity: each step, with probability `input_diversity_prob` per
/// image, the gradient is taken through a random resize-and-pad of the input.
template <typename Scalar>
Tensor<Scalar> dim(const ToyCnn<Scalar>& model, const Tensor<Scalar>& images,
                   const std::vector<int>& labels, const AttackConfig& cfg) {
  return detail::momentum_iterative(model, images, labels, cfg, cfg.input_diversity_prob);
}

/// Expands per-(channel, region) values (C x K) to a 1 x C x H x W tensor.
template <typename Scalar>
Tensor<Scalar> expand_regions(const RowMatrix<Scalar>& values, const RegionPartition& partition) {
  if (values.cols() != partition.k_regions()) throw ShapeError("expand_regions: K mismatch");
  Tensor<Scalar> out(Shape{1, values.rows(), partition.height(), partition.width()});
  const auto& labels = partition.label_map();
  for (Index c = 0; c < values.rows(); ++c) {
    auto plane = out.plane(0).row(c);
    for (Index p = 0; p < partition.pixel_count(); ++p) plane[p] = values(c, labels[p]);
  }
  return out;
}

/// Random piecewise-constant perturbation: an independent fair +-eps per (region, channel).
inline PerturbationArtifact rp_baseline(const RegionPartition& partition, Index channels,
                                        double epsilon, std::uint64_t seed,
                                        std::optional<RegionSplitSpec> split = std::nullopt) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  const Real r = static_cast<Real>(epsilon / kPixelScale);
  RowMatrix<Real> values(channels, partition.k_regions());
  for (Index c = 0; c < channels; ++c)
    for (int k = 0; k < partition.k_regions(); ++k) values(c, k) = coin(rng) ? r : -r;
  PerturbationArtifact art;
  art.tensor = expand_regions(values, partition);
  art.epsilon = epsilon;
  art.split = split;
  art.method = "rp";
  art.seed = seed;
  return art;
}

struct OpConfig {
  int iterations = 200;
  double step_size = -1.0;  // normalized units; negative means eps / 10
  Index batch_size = 32;
  std::uint64_t seed = 0;
};

/// Optimizes one value per (region, channel) by projected sign-gradient ascent on the
/// mean classification loss over mini-batches of `data`.
template <typename Scalar>
PerturbationArtifact op_baseline(const ToyCnn<Scalar>& model, const LabeledSet<Scalar>& data,
                                 const RegionPartition& partition, double epsilon,
                                 const OpConfig& cfg,
                                 std::optional<RegionSplitSpec> split = std::nullopt) {
  if (data.empty()) throw std::invalid_argument("op_baseline: empty dataset");
  const double radius = epsilon / kPixelScale;
  const double step = cfg.step_size < 0.0 ? radius / 10.0 : cfg.step_size;
  const Index channels = data.images.c();
  RowMatrix<Scalar> values = RowMatrix<Scalar>::Zero(channels, partition.k_regions());
  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order;
  Index cursor = 0;

  PerturbationArtifact art;
  art.epsilon = epsilon;
  art.split = split;
  art.method = "op";
  art.seed = cfg.seed;
  art.source_model_id = model.id();

  for (int it = 0; it < cfg.iterations; ++it) {
    if (cursor == 0 || cursor >= Index(order.size())) {
      order = detail::shuffled(data.size(), rng);
      cursor = 0;
    }
    const Index count = std::min(cfg.batch_size, Index(order.size()) - cursor);
    std::vector<Index> idx(order.begin() + cursor, order.begin() + cursor + count);
    cursor += count;
    const LabeledSet<Scalar> batch = data.subset(idx);

    art.tensor = expand_regions(values, partition).template cast<Real>();
    const Tensor<Scalar> adv = apply_universal(batch.images, art);
    const auto lg = loss_grad(model, adv, batch.labels, false, true);
    if (!std::isfinite(double(lg.mean_loss))) throw NonFiniteError("op_baseline: loss diverged");

    RowMatrix<Scalar> grad = RowMatrix<Scalar>::Zero(channels, partition.k_regions());
    const auto& labels = partition.label_map();
    for (Index n = 0; n < adv.n(); ++n) {
      const auto g = lg.grad_input.plane(n);
      for (Index c = 0; c < channels; ++c)
        for (Index p = 0; p < partition.pixel_count(); ++p) grad(c, labels[p]) += g(c, p);
    }
    values.array() += Scalar(step) * sign_nonzero(grad.array());
    values = values.array().max(Scalar(-radius)).min(Scalar(radius)).matrix();
  }
  art.tensor = expand_regions(values, partition).template cast<Real>();
  return art;
}

}  // namespace rhp
