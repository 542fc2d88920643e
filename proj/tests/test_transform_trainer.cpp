#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "rhp/eval_harness.hpp"
#include "rhp/transform_trainer.hpp"
#include "test_util.hpp"

using namespace rhp;

namespace {

struct Vertical8 {
  RegionSplitSpec split = RegionSplitSpec::vertical(8);
  std::shared_ptr<const RegionPartition> part =
      std::make_shared<const RegionPartition>(build_partition(split, 32, 32));
};

TrainConfig quick(int epochs, std::uint64_t seed = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  return c;
}

const ToyCnn<Real>& model() { return rhp::test::toy_fixture().model; }
const LabeledSet<Real>& module_set() { return rhp::test::toy_fixture().module_set; }

}  // namespace

TEST(TransformTrainer, ZeroEpochsReturnsInit) {
  Vertical8 s;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, quick(0, 5));
  const auto init = init_transformer<Real>(3, s.part, 5, s.split);
  EXPECT_EQ(r.params.pack(), init.pack());
  EXPECT_TRUE(r.log.steps.empty());
  const Tensor<Real> g = rhp::test::random_tensor<Real>(Shape{1, 3, 32, 32}, 1);
  EXPECT_EQ(transform_eval(g, r.params).array().matrix(), g.array().matrix());
}

TEST(TransformTrainer, DeterministicAndFrozenClassifier) {
  Vertical8 s;
  const Vector<Real> before = model().params();
  const auto a = train_transformer(model(), module_set(), s.part, s.split, quick(2, 3));
  const auto b = train_transformer(model(), module_set(), s.part, s.split, quick(2, 3));
  EXPECT_EQ(model().params(), before);
  EXPECT_EQ(a.params.pack(), b.params.pack());
  EXPECT_EQ(a.params.rn.moving_mean, b.params.rn.moving_mean);
  EXPECT_EQ(a.params.rn.moving_var, b.params.rn.moving_var);
  ASSERT_EQ(a.log.steps.size(), b.log.steps.size());
  for (std::size_t i = 0; i < a.log.steps.size(); ++i) EXPECT_EQ(a.log.steps[i].loss, b.log.steps[i].loss);
  const auto c = train_transformer(model(), module_set(), s.part, s.split, quick(2, 4));
  EXPECT_NE(a.params.pack(), c.params.pack());
}

TEST(TransformTrainer, OnlyModuleParametersChange) {
  Vertical8 s;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, quick(2, 6));
  const auto init = init_transformer<Real>(3, s.part, 6, s.split);
  const Vector<Real> a = init.pack(), b = r.params.pack();
  ASSERT_EQ(a.size(), 3 * 3 + 3 + 2 * 8);
  EXPECT_EQ((a.array() != b.array()).count(), a.size());
  EXPECT_FLOAT_EQ(r.params.input_scale, 1.0f / 32.0f);
}

TEST(TransformTrainer, LogHasOneEntryPerStep) {
  Vertical8 s;
  TrainConfig c = quick(3, 7);
  c.batch_size = 50;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, c);
  const std::size_t per_epoch = (module_set().size() + 49) / 50;
  ASSERT_EQ(r.log.steps.size(), 3 * per_epoch);
  for (std::size_t i = 0; i < r.log.steps.size(); ++i) {
    EXPECT_EQ(r.log.steps[i].iteration, long(i));
    EXPECT_EQ(r.log.steps[i].epoch, int(i / per_epoch));
    EXPECT_GE(r.log.steps[i].frac_b_over_a, 0.0);
    EXPECT_LE(r.log.steps[i].frac_c_over_d, 1.0);
  }
  EXPECT_EQ(r.log.epoch_checkpoints.size(), 3u);
  EXPECT_EQ(r.log.last_epoch(), 2);
  // Fresh module: c = 0 on the first step.
  EXPECT_EQ(r.log.steps[0].frac_c_over_d, 0.0);
}

TEST(TransformTrainer, StepBudgetOverridesEpochs) {
  Vertical8 s;
  TrainConfig c = quick(100, 8);
  c.steps = 5;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, c);
  EXPECT_EQ(r.log.steps.size(), 5u);
}

TEST(TransformTrainer, TrainSetSizeTakesPrefix) {
  Vertical8 s;
  TrainConfig c = quick(2, 9);
  c.train_set_size = 4;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, c);
  EXPECT_EQ(r.log.steps.size(), 2u);
  EXPECT_FLOAT_EQ(r.params.input_scale, 0.25f);
  const auto same = train_transformer(model(), module_set().head(4), s.part, s.split, quick(2, 9));
  EXPECT_EQ(r.params.pack(), same.params.pack());
}

TEST(TransformTrainer, TuWithZeroNoiseKeepsConvWeights) {
  Vertical8 s;
  TrainConfig c = quick(2, 10);
  c.noise_scale = 0.0;
  const auto r = train_tu_variant(model(), module_set(), s.part, s.split, c);
  const auto init = init_transformer<Real>(3, s.part, 10, s.split);
  // A zero input gives a zero weight gradient; only bias, gamma and beta move.
  EXPECT_EQ(r.params.conv_weight, init.conv_weight);
  EXPECT_NE(r.params.rn.beta, init.rn.beta);
  EXPECT_EQ(r.log.steps[0].frac_b_over_a, 0.0);
  const PerturbationArtifact u = universal_perturbation(r.params, 16.0, 32, 32);
  EXPECT_EQ(homogeneity_score(u.tensor, *s.part).ratio, 0.0);
}

TEST(TransformTrainer, TuIsSeeded) {
  Vertical8 s;
  const auto a = train_tu_variant(model(), module_set(), s.part, s.split, quick(1, 11));
  const auto b = train_tu_variant(model(), module_set(), s.part, s.split, quick(1, 11));
  EXPECT_EQ(a.params.pack(), b.params.pack());
}

TEST(TransformTrainer, LinearSignModeRuns) {
  Vertical8 s;
  TrainConfig c = quick(1, 12);
  c.sign_mode = SignMode::linear;
  const auto r = train_transformer(model(), module_set(), s.part, s.split, c);
  EXPECT_TRUE(r.params.pack().allFinite());
  EXPECT_EQ(parse_sign_mode(to_string(SignMode::linear)), SignMode::linear);
  EXPECT_EQ(parse_sign_mode("straight_through"), SignMode::straight_through);
  EXPECT_THROW(parse_sign_mode("soft"), std::invalid_argument);
}

TEST(TransformTrainer, ConfigErrors) {
  Vertical8 s;
  TrainConfig c = quick(1);
  c.epsilon = 0;
  EXPECT_THROW(train_transformer(model(), module_set(), s.part, s.split, c), std::invalid_argument);
  c = quick(1);
  c.batch_size = 0;
  EXPECT_THROW(train_transformer(model(), module_set(), s.part, s.split, c), std::invalid_argument);
  EXPECT_THROW(train_transformer(model(), LabeledSet<Real>{}, s.part, s.split, quick(1)),
               std::invalid_argument);
}

TEST(TransformTrainer, LossRisesOverTraining) {
  // Mean loss over the final epoch against the first epoch, on several seeds.
  Vertical8 s;
  int rises = 0;
  const int runs = 4;
  for (int seed = 1; seed <= runs; ++seed) {
    const auto r = train_transformer(model(), module_set(), s.part, s.split, quick(8, seed));
    const double first = r.log.epoch_mean(0, &TrainStep::loss);
    const double last = r.log.epoch_mean(r.log.last_epoch(), &TrainStep::loss);
    if (last > first) ++rises;
  }
  EXPECT_GE(rises, 3);
}

TEST(TransformTrainer, TrainedUniversalRaisesHeldOutError) {
  Vertical8 s;
  const auto& f = rhp::test::toy_fixture();
  const auto r = train_transformer(model(), module_set(), s.part, s.split, quick(8, 2));
  const PerturbationArtifact u = universal_perturbation(r.params, 16.0, 32, 32);
  const EvalReport rep =
      error_increase(f.model, f.eval_set, apply_universal(f.eval_set.images, u), 16.0, "rhp-U", 0);
  EXPECT_GT(rep.adv_error, rep.clean_error);
}

TEST(TransformTrainer, TrainedModuleHomogenizesGradients) {
  Vertical8 s;
  const auto& f = rhp::test::toy_fixture();
  const auto r = train_transformer(model(), module_set(), s.part, s.split, quick(8, 3));
  const auto data = f.eval_set.head(20);
  const Tensor<Real> raw = input_gradient(f.model, data.images, data.labels);
  const Tensor<Real> shaped = rhp_direction(f.model, r.params, data.images, data.labels);
  int wins = 0;
  for (Index n = 0; n < data.size(); ++n) {
    if (homogeneity_score(shaped.slice(n, 1), *s.part).ratio <
        homogeneity_score(raw.slice(n, 1), *s.part).ratio) {
      ++wins;
    }
  }
  EXPECT_GE(wins, 18);
}
