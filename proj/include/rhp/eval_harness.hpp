#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rhp/attacks.hpp"
#include "rhp/gradient_transformer.hpp"
#include "rhp/model_zoo.hpp"
#include "rhp/transform_trainer.hpp"

namespace rhp {

struct EvalReport {
  std::string model_id;
  std::string attack_id;
  double clean_error = 0.0;
  double adv_error = 0.0;
  double error_increase = 0.0;
  Index sample_count = 0;
  std::uint64_t seed = 0;
};

struct HomogeneityReport {
  double within_region_variance = 0.0;
  double total_variance = 0.0;
  double ratio = 0.0;
};

/// Raised when an adversarial image leaves the epsilon ball of its clean image.
class BudgetViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fraction of samples whose arg-max logit differs from the label.
template <typename Scalar>
double error_rate(const Predictor<Scalar>& model, const LabeledSet<Scalar>& data,
                  std::uint64_t seed) {
  return top1_error(model, data, seed);
}

/// Largest per-pixel deviation allowed by the audit: eps/255 plus 1e-9 and a few ulps
/// of the working precision.
template <typename Scalar>
double audit_tolerance(double epsilon255) {
  return epsilon255 / kPixelScale + 1e-9 + 4.0 * double(std::numeric_limits<Scalar>::epsilon());
}

/// Re-checks every adversarial image against its clean image: inside the eps-ball and [0, 1].
template <typename Scalar>
void audit_budget(const Tensor<Scalar>& clean, const Tensor<Scalar>& adv, double epsilon255) {
  require_shape(adv, clean.shape(), "budget audit");
  const double tol = audit_tolerance<Scalar>(epsilon255);
  const double dev =
      clean.size() ? (adv.array() - clean.array()).abs().maxCoeff() : 0.0;
  if (!(dev <= tol)) {
    throw BudgetViolation("adversarial image deviates by " + std::to_string(dev * kPixelScale) +
                          "/255, budget " + std::to_string(epsilon255) + "/255");
  }
  if (adv.size() && (adv.array().minCoeff() < Scalar(0) || adv.array().maxCoeff() > Scalar(1))) {
    throw BudgetViolation("adversarial image leaves [0, 1]");
  }
}

/// Error increase of `model` when `adversarial` replaces the clean images. Randomized
/// models see the same random draws for both passes.
template <typename Scalar>
EvalReport error_increase(const Predictor<Scalar>& model, const LabeledSet<Scalar>& data,
                          const Tensor<Scalar>& adversarial, double epsilon255,
                          const std::string& attack_id, std::uint64_t seed) {
  audit_budget(data.images, adversarial, epsilon255);
  EvalReport r;
  r.model_id = model.id();
  r.attack_id = attack_id;
  r.sample_count = data.size();
  r.seed = seed;
  r.clean_error = error_rate(model, data, seed);
  LabeledSet<Scalar> adv{adversarial, data.labels, data.class_count};
  r.adv_error = error_rate(model, adv, seed);
  r.error_increase = r.adv_error - r.clean_error;
  return r;
}

/// An attack crafted against a designated source model.
template <typename Scalar>
struct AttackSpec {
  std::string id;
  double epsilon = 16.0;  // 255-scale
  std::function<Tensor<Scalar>(const Tensor<Scalar>&, const std::vector<int>&)> generate;
};

template <typename Scalar>
AttackSpec<Scalar> universal_attack(std::string id, const PerturbationArtifact& artifact) {
  return {std::move(id), artifact.epsilon,
          [artifact](const Tensor<Scalar>& x, const std::vector<int>&) {
            return apply_universal(x, artifact);
          }};
}

/// One report per (attack, target). Each attack's images are generated once.
template <typename Scalar>
std::vector<EvalReport> transfer_matrix(const std::vector<const Predictor<Scalar>*>& targets,
                                        const std::vector<AttackSpec<Scalar>>& attacks,
                                        const LabeledSet<Scalar>& data, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("transfer matrix on an empty dataset");
  std::vector<EvalReport> out;
  for (const auto& attack : attacks) {
    const Tensor<Scalar> adv = attack.generate(data.images, data.labels);
    for (const auto* target : targets) {
      out.push_back(error_increase(*target, data, adv, attack.epsilon, attack.id, seed));
    }
  }
  return out;
}

/// Pooled within-(region, channel) variance over the per-channel variance, both
/// population variances averaged over cells / channels weighted by pixel count.
template <typename Scalar>
HomogeneityReport homogeneity_score(const Tensor<Scalar>& perturbation,
                                    const RegionPartition& partition) {
  if (perturbation.n() != 1 || perturbation.h() != partition.height() ||
      perturbation.w() != partition.width()) {
    throw ShapeError("homogeneity_score: perturbation does not match partition");
  }
  const auto& labels = partition.label_map();
  const int K = partition.k_regions();
  const Index hw = partition.pixel_count();
  double within = 0.0, total = 0.0;
  for (Index c = 0; c < perturbation.c(); ++c) {
    const auto row = perturbation.plane(0).row(c);
    std::vector<double> sum(K, 0.0);
    double all = 0.0;
    for (Index p = 0; p < hw; ++p) {
      sum[labels[p]] += double(row[p]);
      all += double(row[p]);
    }
    const double mean_all = all / double(hw);
    for (Index p = 0; p < hw; ++p) {
      const double v = double(row[p]);
      const double dk = v - sum[labels[p]] / double(partition.region_sizes()[labels[p]]);
      within += dk * dk;
      total += (v - mean_all) * (v - mean_all);
    }
  }
  const double denom = double(hw * perturbation.c());
  HomogeneityReport r;
  r.within_region_variance = within / denom;
  r.total_variance = total / denom;
  r.ratio = r.total_variance > 0.0 ? r.within_region_variance / r.total_variance : 0.0;
  return r;
}

struct UniversalityGap {
  EvalReport universal;
  EvalReport image_dependent;
  double gap = 0.0;
};

/// Compares eps * sign(T(0)) applied to every image against per-image rhp_attack.
/// Both are crafted with `source`; errors are measured on `target`.
template <typename Scalar>
UniversalityGap universality_gap(const TransformerParams<Scalar>& params,
                                 const ToyCnn<Scalar>& source, const Predictor<Scalar>& target,
                                 const LabeledSet<Scalar>& data, double epsilon255,
                                 std::uint64_t seed) {
  AttackConfig cfg;
  cfg.epsilon = epsilon255;
  cfg.seed = seed;
  const PerturbationArtifact u =
      universal_perturbation(params, epsilon255, data.images.h(), data.images.w());
  UniversalityGap g;
  g.universal =
      error_increase(target, data, apply_universal(data.images, u), epsilon255, "rhp-U", seed);
  g.image_dependent = error_increase(
      target, data, rhp_attack(source, params, data.images, data.labels, cfg), epsilon255,
      "rhp-I", seed);
  g.gap = std::abs(g.universal.error_increase - g.image_dependent.error_increase);
  return g;
}

struct KSweepRow {
  int k = 0;
  PerturbationArtifact artifact;
  HomogeneityReport homogeneity;
  std::vector<EvalReport> reports;  // one per target
};

/// Trains one transformer per K (same seeds), then evaluates each universal artifact on
/// every target.
template <typename Scalar>
std::vector<KSweepRow> k_sweep(const ToyCnn<Scalar>& source,
                               const std::vector<const Predictor<Scalar>*>& targets,
                               const LabeledSet<Scalar>& train, const LabeledSet<Scalar>& eval,
                               SplitKind kind, const std::vector<int>& k_values,
                               const TrainConfig& cfg, std::uint64_t eval_seed) {
  if (kind == SplitKind::grid) throw std::invalid_argument("k_sweep needs a 1-D split kind");
  std::vector<KSweepRow> rows;
  const Index H = train.images.h(), W = train.images.w();
  for (int k : k_values) {
    const RegionSplitSpec split{kind, k, 0, 0, 0};
    auto partition = std::make_shared<const RegionPartition>(build_partition(split, H, W));
    const TrainResult<Scalar> trained = train_transformer(source, train, partition, split, cfg);
    KSweepRow row;
    row.k = k;
    row.artifact = universal_perturbation(trained.params, cfg.epsilon, H, W);
    row.artifact.source_model_id = source.id();
    row.artifact.seed = cfg.seed;
    row.homogeneity = homogeneity_score(row.artifact.tensor, *partition);
    const auto adv = apply_universal(eval.images, row.artifact);
    for (const auto* target : targets) {
      row.reports.push_back(error_increase(*target, eval, adv, cfg.epsilon,
                                           "rhp-U-K" + std::to_string(k), eval_seed));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace rhp
