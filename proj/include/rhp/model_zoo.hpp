#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "rhp/nn.hpp"
#include "rhp/optim.hpp"
#include "rhp/resample.hpp"
#include "rhp/tensor.hpp"

namespace rhp {

/// Images in [0, 1] with integer labels.
template <typename Scalar>
struct LabeledSet {
  Tensor<Scalar> images;
  std::vector<int> labels;
  int class_count = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  bool empty() const { return labels.empty(); }

  LabeledSet subset(const std::vector<Index>& idx) const {
    LabeledSet out;
    out.class_count = class_count;
    out.images = Tensor<Scalar>(Shape{Index(idx.size()), images.c(), images.h(), images.w()});
    out.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.images.image(Index(i)) = images.image(idx[i]);
      out.labels.push_back(labels[idx[i]]);
    }
    return out;
  }

  LabeledSet head(Index count) const {
    std::vector<Index> idx(std::min(count, size()));
    std::iota(idx.begin(), idx.end(), Index(0));
    return subset(idx);
  }

  template <typename Other>
  LabeledSet<Other> cast() const {
    return {images.template cast<Other>(), labels, class_count};
  }
};

/// Anything that maps a batch to logits. Randomized predictors draw from `rng`.
template <typename Scalar>
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual RowMatrix<Scalar> logits(const Tensor<Scalar>& x, std::mt19937_64& rng) const = 0;
  virtual std::string id() const = 0;
};

/// conv3x3(3->16)+ReLU+pool2, conv3x3(16->32)+ReLU+pool2, conv3x3(32->64)+ReLU+GAP,
/// linear(64->classes). All parameters live in one flat vector.
template <typename Scalar>
class ToyCnn : public Predictor<Scalar> {
 public:
  struct Activations {
    nn::ConvCache<Scalar> conv[3];
    nn::PoolCache pool[2];
    Tensor<Scalar> relu[3];
    RowMatrix<Scalar> features;
  };

  ToyCnn() = default;
  ToyCnn(int class_count, Shape input, std::string model_id)
      : classes_(class_count), input_(input), id_(std::move(model_id)) {
    input_.n = 1;
    const Index widths[4] = {input.c, 16, 32, 64};
    Index o = 0;
    for (int l = 0; l < 3; ++l) {
      layers_[l] = {o, widths[l + 1], widths[l] * 9};
      o += widths[l + 1] * widths[l] * 9;
      bias_[l] = o;
      o += widths[l + 1];
    }
    layers_[3] = {o, class_count, 64};
    o += class_count * 64;
    bias_[3] = o;
    o += class_count;
    params_ = Vector<Scalar>::Zero(o);
  }

  int class_count() const { return classes_; }
  const Shape& input_shape() const { return input_; }
  std::string id() const override { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  Vector<Scalar>& params() { return params_; }
  const Vector<Scalar>& params() const { return params_; }

  std::vector<std::string> architecture() const {
    return {"conv3x3(" + std::to_string(input_.c) + "->16)", "relu", "maxpool2",
            "conv3x3(16->32)", "relu", "maxpool2", "conv3x3(32->64)", "relu",
            "global_avg_pool", "linear(64->" + std::to_string(classes_) + ")"};
  }

  auto weight(int l) { return map_w(params_.data(), l); }
  auto weight(int l) const { return map_w(params_.data(), l); }
  auto bias(int l) { return params_.segment(bias_[l], layers_[l].rows); }
  auto bias(int l) const { return params_.segment(bias_[l], layers_[l].rows); }

  RowMatrix<Scalar> forward(const Tensor<Scalar>& x, Activations* act) const {
    if (x.c() != input_.c || x.h() != input_.h || x.w() != input_.w) {
      throw ShapeError("toy cnn: input " + x.shape().str() + " does not match model input");
    }
    Activations local;
    Activations& a = act ? *act : local;
    Tensor<Scalar> t = x;
    for (int l = 0; l < 3; ++l) {
      t = nn::conv3x3_forward(t, weight(l), bias(l), act ? &a.conv[l] : nullptr);
      nn::relu_inplace(t);
      if (act) a.relu[l] = t;
      if (l < 2) t = nn::maxpool2_forward(t, act ? &a.pool[l] : nullptr);
    }
    RowMatrix<Scalar> feats = nn::global_avg_pool(t);
    RowMatrix<Scalar> logits = feats * weight(3).transpose();
    logits.rowwise() += bias(3).transpose();
    if (act) a.features = std::move(feats);
    return logits;
  }

  RowMatrix<Scalar> logits(const Tensor<Scalar>& x, std::mt19937_64&) const override {
    return forward(x, nullptr);
  }
  RowMatrix<Scalar> logits(const Tensor<Scalar>& x) const { return forward(x, nullptr); }

  /// Backpropagates d(loss)/d(logits). Either output may be null.
  void backward(const Activations& a, const RowMatrix<Scalar>& grad_logits,
                Vector<Scalar>* grad_params, Tensor<Scalar>* grad_input) const {
    Vector<Scalar> scratch;
    Vector<Scalar>& gp = grad_params ? *grad_params : scratch;
    const bool param_grads = grad_params != nullptr;
    gp = Vector<Scalar>::Zero(param_grads ? params_.size() : 0);

    if (param_grads) {
      map_w(gp.data(), 3).noalias() += grad_logits.transpose() * a.features;
      gp.segment(bias_[3], classes_) += grad_logits.colwise().sum().transpose();
    }
    const RowMatrix<Scalar> dfeat = grad_logits * weight(3);

    Tensor<Scalar> g = nn::global_avg_pool_backward(dfeat, a.relu[2].shape());
    for (int l = 2; l >= 0; --l) {
      nn::relu_backward_inplace(g, a.relu[l]);
      const bool need_input = l > 0 || grad_input != nullptr;
      Tensor<Scalar> gin;
      if (param_grads) {
        nn::conv3x3_backward(g, a.conv[l], weight(l), map_w(gp.data(), l),
                             gp.segment(bias_[l], layers_[l].rows), true,
                             need_input ? &gin : nullptr);
      } else {
        nn::conv3x3_backward(g, a.conv[l], weight(l), RowMatrix<Scalar>(), Vector<Scalar>(), false,
                             need_input ? &gin : nullptr);
      }
      if (l > 0) {
        g = nn::maxpool2_backward(gin, a.pool[l - 1]);
      } else if (grad_input) {
        *grad_input = std::move(gin);
      }
    }
  }

 private:
  struct Layout {
    Index offset = 0, rows = 0, cols = 0;
  };

  template <typename Ptr>
  auto map_w(Ptr base, int l) const {
    using M = std::conditional_t<std::is_const_v<std::remove_pointer_t<Ptr>>,
                                 const RowMatrix<Scalar>, RowMatrix<Scalar>>;
    return Eigen::Map<M>(base + layers_[l].offset, layers_[l].rows, layers_[l].cols);
  }

  int classes_ = 0;
  Shape input_{};
  std::string id_;
  Layout layers_[4];
  Index bias_[4] = {0, 0, 0, 0};
  Vector<Scalar> params_;
};

/// He-normal weights, zero biases.
template <typename Scalar>
ToyCnn<Scalar> build_toy_cnn(int class_count, Shape input, std::uint64_t seed,
                             std::string model_id = "toy_cnn") {
  ToyCnn<Scalar> model(class_count, input, std::move(model_id));
  std::mt19937_64 rng(seed);
  for (int l = 0; l < 4; ++l) {
    auto w = model.weight(l);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(w.cols())));
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = static_cast<Scalar>(normal(rng));
  }
  return model;
}

template <typename Scalar>
struct LossGrad {
  Scalar mean_loss = Scalar(0);
  Vector<Scalar> per_sample;
  Vector<Scalar> grad_params;  // of the mean loss
  Tensor<Scalar> grad_input;   // of each image's own loss
};

/// Loss and gradients at a batch. Input gradients are per image (the gradient of
/// sample i's loss w.r.t. image i), independent of batch size.
template <typename Scalar>
LossGrad<Scalar> loss_grad(const ToyCnn<Scalar>& model, const Tensor<Scalar>& x,
                           const std::vector<int>& labels, bool want_params, bool want_input) {
  typename ToyCnn<Scalar>::Activations act;
  const RowMatrix<Scalar> logits = model.forward(x, &act);
  LossGrad<Scalar> out;
  if (want_params) {
    const auto ce = nn::cross_entropy(logits, labels, true);
    model.backward(act, ce.grad_logits, &out.grad_params, nullptr);
  }
  const auto ce = nn::cross_entropy(logits, labels, false);
  out.mean_loss = ce.mean;
  out.per_sample = ce.per_sample;
  if (want_input) {
    model.backward(act, ce.grad_logits, nullptr, &out.grad_input);
    if (!out.grad_input.all_finite()) throw NonFiniteError("non-finite input gradient");
  }
  return out;
}

/// Gradient of each image's cross-entropy loss w.r.t. that image.
template <typename Scalar>
Tensor<Scalar> input_gradient(const ToyCnn<Scalar>& model, const Tensor<Scalar>& images,
                              const std::vector<int>& labels) {
  return loss_grad(model, images, labels, false, true).grad_input;
}

template <typename Scalar>
struct ClassifierTrainConfig {
  int epochs = 10;
  double learning_rate = 5e-3;
  Index batch_size = 32;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<Index> shuffled(Index n, std::mt19937_64& rng) {
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), Index(0));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

template <typename Scalar>
Index count_errors(const RowMatrix<Scalar>& logits, const std::vector<int>& labels,
                   Index offset = 0) {
  Index errors = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg != labels[offset + i]) ++errors;
  }
  return errors;
}

}  // namespace detail

/// Top-1 error of a predictor; `rng` feeds randomized predictors in batch order.
template <typename Scalar>
double top1_error(const Predictor<Scalar>& model, const LabeledSet<Scalar>& data,
                  std::uint64_t seed, Index batch_size = 64) {
  if (data.empty()) throw std::invalid_argument("error rate of an empty dataset");
  std::mt19937_64 rng(seed);
  Index errors = 0;
  for (Index first = 0; first < data.size(); first += batch_size) {
    const Index count = std::min(batch_size, data.size() - first);
    errors += detail::count_errors(model.logits(data.images.slice(first, count), rng),
                                   data.labels, first);
  }
  return double(errors) / double(data.size());
}

/// Per-batch hook: replaces the clean batch before the update (used for adversarial training).
template <typename Scalar>
using BatchTransform = std::function<Tensor<Scalar>(const ToyCnn<Scalar>&, const Tensor<Scalar>&,
                                                    const std::vector<int>&, std::mt19937_64&)>;

template <typename Scalar>
struct ClassifierTrainResult {
  std::vector<double> epoch_loss;
  double train_error = 0.0;
};

/// Mean cross-entropy minimization with Adam over shuffled mini-batches.
template <typename Scalar>
ClassifierTrainResult<Scalar> train_classifier(ToyCnn<Scalar>& model, const LabeledSet<Scalar>& data,
                                               const ClassifierTrainConfig<Scalar>& cfg,
                                               const BatchTransform<Scalar>& transform = {}) {
  ClassifierTrainResult<Scalar> result;
  if (cfg.epochs <= 0) return result;
  if (data.empty()) throw std::invalid_argument("training on an empty dataset");
  std::mt19937_64 rng(cfg.seed);
  Adam<Scalar> adam(model.params().size(), cfg.learning_rate);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled(data.size(), rng);
    double total = 0.0;
    for (Index first = 0; first < data.size(); first += cfg.batch_size) {
      const Index count = std::min(cfg.batch_size, data.size() - first);
      std::vector<Index> idx(order.begin() + first, order.begin() + first + count);
      LabeledSet<Scalar> batch = data.subset(idx);
      if (transform) batch.images = transform(model, batch.images, batch.labels, rng);
      const auto lg = loss_grad(model, batch.images, batch.labels, true, false);
      if (!std::isfinite(double(lg.mean_loss))) throw NonFiniteError("classifier loss diverged");
      adam.step(model.params(), lg.grad_params);
      total += double(lg.mean_loss) * double(count);
    }
    result.epoch_loss.push_back(total / double(data.size()));
  }
  result.train_error = top1_error<Scalar>(model, data, cfg.seed);
  return result;
}

/// L-inf PGD with a random start: `steps` sign steps of size eps/4, projected to the
/// eps-ball and [0, 1]. `eps` is in normalized pixel units.
template <typename Scalar>
Tensor<Scalar> pgd_examples(const ToyCnn<Scalar>& model, const Tensor<Scalar>& x,
                            const std::vector<int>& labels, double eps, int steps,
                            std::mt19937_64& rng) {
  if (eps <= 0.0) return x;
  std::uniform_real_distribution<double> start(-eps, eps);
  Tensor<Scalar> adv = x;
  for (Index i = 0; i < adv.size(); ++i) adv.data()[i] += static_cast<Scalar>(start(rng));
  const Scalar e = static_cast<Scalar>(eps);
  const Scalar step = static_cast<Scalar>(eps / 4.0);
  adv.array() = adv.array().max(x.array() - e).min(x.array() + e).max(Scalar(0)).min(Scalar(1));
  for (int s = 0; s < steps; ++s) {
    const Tensor<Scalar> g = input_gradient(model, adv, labels);
    adv.array() += step * sign_nonzero(g.array());
    adv.array() = adv.array().max(x.array() - e).min(x.array() + e).max(Scalar(0)).min(Scalar(1));
  }
  return adv;
}

/// Adversarial training: each batch is replaced by PGD examples against the current model.
template <typename Scalar>
ClassifierTrainResult<Scalar> adv_train_classifier(ToyCnn<Scalar>& model,
                                                   const LabeledSet<Scalar>& data,
                                                   double epsilon255, int pgd_steps,
                                                   const ClassifierTrainConfig<Scalar>& cfg) {
  if (epsilon255 <= 0.0) return train_classifier(model, data, cfg);
  const double eps = epsilon255 / 255.0;
  BatchTransform<Scalar> pgd = [eps, pgd_steps](const ToyCnn<Scalar>& m, const Tensor<Scalar>& x,
                                                const std::vector<int>& y, std::mt19937_64& rng) {
    return pgd_examples(m, x, y, eps, pgd_steps, rng);
  };
  return train_classifier(model, data, cfg, pgd);
}

/// Random resize-and-pad input transform in front of a classifier. Holds a non-owning
/// reference; the wrapped model must outlive the wrapper.
template <typename Scalar>
class ResizePadDefense : public Predictor<Scalar> {
 public:
  ResizePadDefense(const Predictor<Scalar>& inner, ResizeRange range)
      : inner_(&inner), range_(range) {
    if (!(range.lo > 0.5 && range.lo <= range.hi && range.hi <= 1.0)) {
      throw std::invalid_argument("resize range must lie in (0.5, 1]");
    }
  }

  RowMatrix<Scalar> logits(const Tensor<Scalar>& x, std::mt19937_64& rng) const override {
    Tensor<Scalar> moved(x.shape());
    for (Index n = 0; n < x.n(); ++n) {
      const ResizePadOp op = draw_resize_pad(x.h(), x.w(), range_, rng);
      moved.image(n) = op.apply(x.slice(n, 1)).image(0);
    }
    return inner_->logits(moved, rng);
  }

  std::string id() const override { return inner_->id() + "+resize_pad"; }
  const ResizeRange& range() const { return range_; }

 private:
  const Predictor<Scalar>* inner_;
  ResizeRange range_;
};

}  // namespace rhp
