#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rhp/gradient_transformer.hpp"
#include "rhp/model_zoo.hpp"
#include "rhp/optim.hpp"

namespace rhp {

/// How gradients pass through sign() when building the transformed adversarial image.
enum class SignMode {
  straight_through,  // forward sign, backward identity
  linear,            // no sign: I + eps * g_hat
};

std::string to_string(SignMode mode);
SignMode parse_sign_mode(const std::string& name);

struct TrainConfig {
  int epochs = 50;
  Index batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double epsilon = 16.0;  // 255-scale
  SignMode sign_mode = SignMode::straight_through;
  std::uint64_t seed = 0;
  Index train_set_size = 0;  // 0 = use every image given
  /// When positive, overrides `epochs`: train for exactly this many optimizer steps,
  /// cycling through reshuffled epochs.
  long steps = 0;
  double probe_threshold = 10.0;
  /// TU noise half-width. Negative: derived from the mean |gradient| of the first batch.
  double noise_scale = -1.0;
  double rn_momentum = 0.1;
  double rn_stab_const = 1e-5;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  }
};

struct TrainStep {
  int epoch = 0;
  long iteration = 0;
  double loss = 0.0;
  double frac_b_over_a = 0.0;
  double frac_c_over_d = 0.0;
};

template <typename Scalar>
struct TrainLog {
  std::vector<TrainStep> steps;
  std::vector<TransformerParams<Scalar>> epoch_checkpoints;

  /// Mean of a per-step field over the steps of `epoch`.
  double epoch_mean(int epoch, double TrainStep::*field) const {
    double sum = 0.0;
    int count = 0;
    for (const auto& s : steps) {
      if (s.epoch == epoch) {
        sum += s.*field;
        ++count;
      }
    }
    return count ? sum / count : 0.0;
  }

  int last_epoch() const { return steps.empty() ? -1 : steps.back().epoch; }
};

template <typename Scalar>
struct TrainResult {
  TransformerParams<Scalar> params;
  TrainLog<Scalar> log;
};

/// Produces the per-image module input for a batch, before `input_scale`: the model's
/// loss gradient (RHP) or noise (TU).
template <typename Scalar>
using GradientSource = std::function<Tensor<Scalar>(const Tensor<Scalar>&, const std::vector<int>&)>;

namespace detail {

template <typename Scalar>
TrainResult<Scalar> train_loop(const ToyCnn<Scalar>& model, const LabeledSet<Scalar>& dataset,
                               std::shared_ptr<const RegionPartition> partition,
                               const RegionSplitSpec& split, const TrainConfig& cfg,
                               const GradientSource<Scalar>& source) {
  cfg.validate();
  const LabeledSet<Scalar> data =
      cfg.train_set_size > 0 ? dataset.head(cfg.train_set_size) : dataset;
  TrainResult<Scalar> out;
  out.params = init_transformer<Scalar>(data.images.c(), partition, cfg.seed, split);
  out.params.rn.momentum = Scalar(cfg.rn_momentum);
  out.params.rn.stab_const = Scalar(cfg.rn_stab_const);
  const Index batch_size = std::max<Index>(1, std::min(cfg.batch_size, data.size()));
  out.params.input_scale = Scalar(1) / Scalar(batch_size);
  const long total_steps = cfg.steps > 0 ? cfg.steps : 0;
  if (total_steps == 0 && cfg.epochs == 0) return out;
  if (data.empty()) throw std::invalid_argument("transformer training on an empty dataset");

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<Scalar> adam(out.params.parameter_count(), cfg.learning_rate, cfg.adam_beta1,
                    cfg.adam_beta2);
  const Scalar radius = Scalar(cfg.epsilon / kPixelScale);
  long iteration = 0;

  for (int epoch = 0;; ++epoch) {
    if (total_steps == 0 && epoch >= cfg.epochs) break;
    if (total_steps > 0 && iteration >= total_steps) break;
    const auto order = shuffled(data.size(), rng);
    for (Index first = 0; first < data.size(); first += cfg.batch_size) {
      if (total_steps > 0 && iteration >= total_steps) break;
      const Index count = std::min(cfg.batch_size, data.size() - first);
      std::vector<Index> idx(order.begin() + first, order.begin() + first + count);
      const LabeledSet<Scalar> batch = data.subset(idx);

      Tensor<Scalar> g = source(batch.images, batch.labels);
      g.array() *= out.params.input_scale;
      TransformResult<Scalar> t = transform(g, out.params, Mode::train);

      Tensor<Scalar> pre = batch.images;
      if (cfg.sign_mode == SignMode::straight_through) {
        pre.array() += radius * sign_nonzero(t.g_hat.array());
      } else {
        pre.array() += radius * t.g_hat.array();
      }
      Tensor<Scalar> adv = pre;
      adv.array() = adv.array().max(Scalar(0)).min(Scalar(1));

      const auto lg = loss_grad(model, adv, batch.labels, false, true);
      if (!std::isfinite(double(lg.mean_loss))) {
        throw NonFiniteError("transformer training: loss is not finite");
      }
      // d(mean loss)/d(g_hat): through the clip (interior only) and the sign surrogate.
      Tensor<Scalar> grad_ghat(adv.shape());
      grad_ghat.array() = (pre.array() >= Scalar(0) && pre.array() <= Scalar(1))
                              .select(lg.grad_input.array() * (radius / Scalar(count)), Scalar(0));
      const TransformerGrads<Scalar> grads = transform_backward(grad_ghat, t.cache, out.params);

      Vector<Scalar> theta = out.params.pack();
      adam.step(theta, Vector<Scalar>(-grads.pack()));  // ascent
      out.params.unpack(theta);

      const ProbeFractions pf = probe_fractions(t.probes, cfg.probe_threshold);
      out.log.steps.push_back({epoch, iteration, double(lg.mean_loss), pf.b_over_a, pf.c_over_d});
      ++iteration;
    }
    out.log.epoch_checkpoints.push_back(out.params);
  }
  return out;
}

}  // namespace detail

/// Trains the gradient transformer against a frozen classifier: per batch, g = gradient of
/// the batch-mean loss at the clean images, g_hat = T(g) (train mode), I_hat = clip(I + eps * sign(g_hat)), then one Adam ascent
/// step on L(I_hat, y) w.r.t. the module parameters only.
template <typename Scalar>
TrainResult<Scalar> train_transformer(const ToyCnn<Scalar>& model,
                                      const LabeledSet<Scalar>& dataset,
                                      std::shared_ptr<const RegionPartition> partition,
                                      const RegionSplitSpec& split, const TrainConfig& cfg) {
  GradientSource<Scalar> grad = [&model](const Tensor<Scalar>& x, const std::vector<int>& y) {
    return input_gradient(model, x, y);
  };
  return detail::train_loop(model, dataset, std::move(partition), split, cfg, grad);
}

/// TU ablation: identical loop with seeded uniform noise in place of the loss gradient.
template <typename Scalar>
TrainResult<Scalar> train_tu_variant(const ToyCnn<Scalar>& model,
                                     const LabeledSet<Scalar>& dataset,
                                     std::shared_ptr<const RegionPartition> partition,
                                     const RegionSplitSpec& split, const TrainConfig& cfg) {
  auto noise_rng = std::make_shared<std::mt19937_64>(cfg.seed ^ 0x5bd1e995ULL);
  auto scale = std::make_shared<double>(cfg.noise_scale);
  GradientSource<Scalar> noise = [&model, noise_rng, scale](const Tensor<Scalar>& x,
                                                            const std::vector<int>& y) {
    if (*scale < 0.0) {
      // Uniform(-2s, 2s) has mean |value| s, the mean |gradient| of the first batch.
      *scale = 2.0 * double(input_gradient(model, x, y).array().abs().mean());
    }
    Tensor<Scalar> g(x.shape());
    if (*scale > 0.0) {
      std::uniform_real_distribution<double> u(-*scale, *scale);
      for (Index i = 0; i < g.size(); ++i) g.data()[i] = Scalar(u(*noise_rng));
    }
    return g;
  };
  return detail::train_loop(model, dataset, std::move(partition), split, cfg, noise);
}

}  // namespace rhp
