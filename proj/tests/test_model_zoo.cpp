#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "rhp/dataset.hpp"
#include "rhp/model_zoo.hpp"
#include "test_util.hpp"

using namespace rhp;
using rhp::test::uniform_tensor;

namespace {

// Direct loop evaluation of the classifier, independent of im2col and the pooled caches.
std::vector<double> naive_logits(const ToyCnn<double>& m, const Tensor<double>& x, Index n) {
  const Index widths[4] = {x.c(), 16, 32, 64};
  Index H = x.h(), W = x.w();
  std::vector<double> cur(x.image(n).data(), x.image(n).data() + x.shape().image_size());
  for (int l = 0; l < 3; ++l) {
    const auto w = m.weight(l);
    const auto b = m.bias(l);
    std::vector<double> out(widths[l + 1] * H * W);
    for (Index co = 0; co < widths[l + 1]; ++co)
      for (Index h = 0; h < H; ++h)
        for (Index ww = 0; ww < W; ++ww) {
          double s = b[co];
          for (Index ci = 0; ci < widths[l]; ++ci)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const Index y = h + dy, xx = ww + dx;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                s += w(co, ci * 9 + (dy + 1) * 3 + (dx + 1)) * cur[(ci * H + y) * W + xx];
              }
          out[(co * H + h) * W + ww] = std::max(0.0, s);
        }
    if (l < 2) {
      std::vector<double> pooled(widths[l + 1] * (H / 2) * (W / 2));
      for (Index c = 0; c < widths[l + 1]; ++c)
        for (Index h = 0; h < H / 2; ++h)
          for (Index ww = 0; ww < W / 2; ++ww) {
            double v = -1e300;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                v = std::max(v, out[(c * H + 2 * h + dy) * W + 2 * ww + dx]);
            pooled[(c * (H / 2) + h) * (W / 2) + ww] = v;
          }
      H /= 2;
      W /= 2;
      cur = std::move(pooled);
    } else {
      cur = std::move(out);
    }
  }
  std::vector<double> feat(64, 0.0);
  for (Index c = 0; c < 64; ++c) {
    for (Index p = 0; p < H * W; ++p) feat[c] += cur[c * H * W + p];
    feat[c] /= double(H * W);
  }
  std::vector<double> logits(m.class_count());
  for (int k = 0; k < m.class_count(); ++k) {
    logits[k] = m.bias(3)[k];
    for (Index c = 0; c < 64; ++c) logits[k] += m.weight(3)(k, c) * feat[c];
  }
  return logits;
}

ToyCnn<double> random_model(std::uint64_t seed, Index size = 16) {
  ToyCnn<double> m = build_toy_cnn<double>(10, Shape{1, 3, size, size}, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (int l = 0; l < 4; ++l)
    for (Index i = 0; i < m.bias(l).size(); ++i) m.bias(l)[i] = normal(rng);
  return m;
}

double fd_rel(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4}); }

}  // namespace

TEST(ModelZoo, ForwardMatchesNaiveLoops) {
  const ToyCnn<double> m = random_model(3);
  const Tensor<double> x = uniform_tensor(Shape{3, 3, 16, 16}, 4);
  const RowMatrix<double> logits = m.logits(x);
  ASSERT_EQ(logits.rows(), 3);
  ASSERT_EQ(logits.cols(), 10);
  for (Index n = 0; n < 3; ++n) {
    const auto want = naive_logits(m, x, n);
    for (int k = 0; k < 10; ++k) EXPECT_NEAR(logits(n, k), want[k], 1e-10);
  }
}

TEST(ModelZoo, ZeroImageFollowsBiasPathway) {
  const ToyCnn<double> m = random_model(5);
  const Tensor<double> zero(Shape{1, 3, 16, 16});
  const auto want = naive_logits(m, zero, 0);
  const RowMatrix<double> got = m.logits(zero);
  for (int k = 0; k < 10; ++k) EXPECT_NEAR(got(0, k), want[k], 1e-12);

  // With only the first layer's bias active, every later activation is zero.
  ToyCnn<double> sparse = build_toy_cnn<double>(10, Shape{1, 3, 16, 16}, 6);
  sparse.bias(3).setLinSpaced(10, -1.0, 1.0);
  const RowMatrix<double> only_bias = sparse.logits(zero);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(only_bias(0, k), sparse.bias(3)[k]);
}

TEST(ModelZoo, InputGradientMatchesFiniteDifferences) {
  const ToyCnn<double> m = random_model(7);
  const Tensor<double> x = uniform_tensor(Shape{2, 3, 16, 16}, 8);
  const std::vector<int> y{3, 8};
  const Tensor<double> g = input_gradient(m, x, y);
  const auto loss_of = [&](const Tensor<double>& in, Index n) {
    return nn::cross_entropy<double>(m.logits(in), y, false).per_sample[n];
  };
  const double h = 1e-6;
  int checked = 0;
  for (Index i = 0; i < x.size(); i += 13) {
    const Index n = i / x.shape().image_size();
    Tensor<double> xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    EXPECT_LT(fd_rel(g.data()[i], (loss_of(xp, n) - loss_of(xm, n)) / (2 * h)), 1e-4) << i;
    ++checked;
  }
  EXPECT_GT(checked, 100);
}

TEST(ModelZoo, InputGradientIsPerImage) {
  const ToyCnn<double> m = random_model(9);
  const Tensor<double> x = uniform_tensor(Shape{4, 3, 16, 16}, 10);
  const std::vector<int> y{0, 1, 2, 3};
  const Tensor<double> batch = input_gradient(m, x, y);
  for (Index n = 0; n < 4; ++n) {
    const Tensor<double> single = input_gradient(m, x.slice(n, 1), {y[n]});
    EXPECT_LT((single.image(0) - batch.image(n)).abs().maxCoeff(), 1e-14);
  }
}

TEST(ModelZoo, ParameterGradientMatchesFiniteDifferences) {
  ToyCnn<double> m = random_model(11, 8);
  const Tensor<double> x = uniform_tensor(Shape{2, 3, 8, 8}, 12);
  const std::vector<int> y{1, 5};
  const Vector<double> g = loss_grad(m, x, y, true, false).grad_params;
  const double h = 1e-6;
  for (Index i = 0; i < m.params().size(); i += 37) {
    ToyCnn<double> p = m, q = m;
    p.params()[i] += h;
    q.params()[i] -= h;
    const double num = (loss_grad(p, x, y, false, false).mean_loss -
                        loss_grad(q, x, y, false, false).mean_loss) /
                       (2 * h);
    EXPECT_LT(fd_rel(g[i], num), 1e-4) << i;
  }
}

TEST(ModelZoo, SoftmaxCrossEntropyClosedForm) {
  RowMatrix<double> logits(2, 3);
  logits << 1.0, 2.0, 3.0, 0.0, 0.0, 0.0;
  const auto ce = nn::cross_entropy<double>(logits, {2, 0}, true);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(ce.per_sample[0], std::log(z) - 3.0, 1e-15);
  EXPECT_NEAR(ce.per_sample[1], std::log(3.0), 1e-15);
  EXPECT_NEAR(ce.grad_logits(0, 0), std::exp(1.0) / z / 2, 1e-15);
  EXPECT_NEAR(ce.grad_logits(0, 2), (std::exp(3.0) / z - 1) / 2, 1e-15);
  EXPECT_NEAR(ce.grad_logits(1, 0), (1.0 / 3 - 1) / 2, 1e-15);
  EXPECT_THROW(nn::cross_entropy<double>(logits, {3, 0}), std::out_of_range);
}

TEST(ModelZoo, LinearHeadGradientClosedForm) {
  // All conv weights zero and positive conv biases: the features are a constant vector f
  // and the logits are W f + b, so d(loss)/dW = (softmax - onehot) f^T.
  ToyCnn<double> m = build_toy_cnn<double>(4, Shape{1, 3, 8, 8}, 1);
  for (int l = 0; l < 3; ++l) {
    m.weight(l).setZero();
    m.bias(l).setLinSpaced(m.bias(l).size(), 0.1, 0.9);
  }
  const Tensor<double> x = uniform_tensor(Shape{1, 3, 8, 8}, 2);
  const auto lg = loss_grad(m, x, {2}, true, true);
  const Vector<double> f = m.bias(2);
  Vector<double> logits = m.weight(3) * f + m.bias(3);
  Vector<double> p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  p[2] -= 1.0;
  ToyCnn<double> grads = m;
  grads.params() = lg.grad_params;
  EXPECT_LT((grads.weight(3) - p * f.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((grads.bias(3) - p).cwiseAbs().maxCoeff(), 1e-14);
  // Locally flat in every pixel.
  EXPECT_EQ(lg.grad_input.array().abs().maxCoeff(), 0.0);
}

TEST(ModelZoo, SeededInitialization) {
  const auto a = build_toy_cnn<float>(10, Shape{1, 3, 32, 32}, 3);
  const auto b = build_toy_cnn<float>(10, Shape{1, 3, 32, 32}, 3);
  const auto c = build_toy_cnn<float>(10, Shape{1, 3, 32, 32}, 4);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_NE(a.params(), c.params());
  EXPECT_EQ(a.params().size(), 16 * 27 + 16 + 32 * 144 + 32 + 64 * 288 + 64 + 640 + 10);
  EXPECT_EQ(a.architecture().front(), "conv3x3(3->16)");
  EXPECT_EQ(a.architecture().back(), "linear(64->10)");
}

TEST(ModelZoo, UntrainedIsNearChance) {
  const LabeledSet<Real> data = generate_synthetic_dataset(10, 50, 32, 5);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto m = build_toy_cnn<Real>(10, Shape{1, 3, 32, 32}, seed);
    EXPECT_NEAR(1.0 - top1_error(m, data, 0), 0.10, 0.05);
  }
}

TEST(ModelZoo, ZeroEpochsLeavesParameters) {
  ToyCnn<Real> m = build_toy_cnn<Real>(10, Shape{1, 3, 32, 32}, 1);
  const Vector<Real> before = m.params();
  ClassifierTrainConfig<Real> cfg;
  cfg.epochs = 0;
  train_classifier(m, generate_synthetic_dataset(10, 2, 32, 1), cfg);
  EXPECT_EQ(m.params(), before);
  adv_train_classifier(m, generate_synthetic_dataset(10, 2, 32, 1), 8.0, 2, cfg);
  EXPECT_EQ(m.params(), before);
}

TEST(ModelZoo, AdvTrainingAtZeroEpsilonIsNatural) {
  const LabeledSet<Real> data = generate_synthetic_dataset(10, 4, 32, 2);
  ClassifierTrainConfig<Real> cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  ToyCnn<Real> a = build_toy_cnn<Real>(10, Shape{1, 3, 32, 32}, 1);
  ToyCnn<Real> b = a;
  train_classifier(a, data, cfg);
  adv_train_classifier(b, data, 0.0, 5, cfg);
  EXPECT_EQ(a.params(), b.params());
}

TEST(ModelZoo, PgdExamplesStayInBall) {
  const auto& f = rhp::test::toy_fixture();
  std::mt19937_64 rng(1);
  const auto batch = f.eval_set.head(20);
  const Tensor<Real> adv = pgd_examples(f.model, batch.images, batch.labels, 8.0 / 255, 5, rng);
  EXPECT_LE((adv.array() - batch.images.array()).abs().maxCoeff(), Real(8.0 / 255 + 1e-6));
  EXPECT_GE(adv.array().minCoeff(), 0.0f);
  EXPECT_LE(adv.array().maxCoeff(), 1.0f);
}

TEST(ModelZoo, TrainedClassifierReachesLowError) {
  // Fixture is smaller than the CLI default; the full-size run is checked by acceptance.
  const auto& f = rhp::test::toy_fixture();
  EXPECT_LE(f.eval_error, 0.25);
  EXPECT_DOUBLE_EQ(top1_error(f.model, f.eval_set, 0), f.eval_error);
}

TEST(ModelZoo, ResizePadIdentityWrapper) {
  const auto& f = rhp::test::toy_fixture();
  const Vector<Real> before = f.model.params();
  ResizePadDefense<Real> wrapped(f.model, {1.0, 1.0});
  std::mt19937_64 rng(3);
  const auto batch = f.eval_set.head(16);
  EXPECT_EQ(wrapped.logits(batch.images, rng), f.model.logits(batch.images));
  EXPECT_EQ(wrapped.id(), "fixture+resize_pad");
  EXPECT_EQ(f.model.params(), before);
}

TEST(ModelZoo, ResizePadSeededDeterminism) {
  const auto& f = rhp::test::toy_fixture();
  ResizePadDefense<Real> wrapped(f.model, {0.8, 1.0});
  const auto batch = f.eval_set.head(16);
  std::mt19937_64 r1(5), r2(5), r3(6);
  const auto a = wrapped.logits(batch.images, r1);
  EXPECT_EQ(a, wrapped.logits(batch.images, r2));
  EXPECT_NE(a, wrapped.logits(batch.images, r3));
  EXPECT_THROW(ResizePadDefense<Real>(f.model, {0.4, 1.0}), std::invalid_argument);
  EXPECT_THROW(ResizePadDefense<Real>(f.model, {0.9, 0.8}), std::invalid_argument);
}

TEST(ModelZoo, ResizePadAdjoint) {
  const ResizePadOp op(12, 12, 9, 2, 1);
  const Tensor<double> x = uniform_tensor(Shape{2, 3, 12, 12}, 1);
  const Tensor<double> y = uniform_tensor(Shape{2, 3, 12, 12}, 2);
  const double lhs = (op.apply(x).array() * y.array()).sum();
  const double rhs = (x.array() * op.adjoint(y).array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12);
  const Tensor<double> moved = op.apply(x);
  EXPECT_EQ(moved(0, 0, 0, 0), 0.0);   // padding above the placement
  EXPECT_EQ(moved(0, 0, 11, 11), 0.0);
  EXPECT_THROW(ResizePadOp(8, 8, 9, 0, 0), ShapeError);
  EXPECT_TRUE(ResizePadOp(8, 8, 8, 0, 0).is_identity());
}

TEST(ModelZoo, ResizePadPreservesConstantInterior) {
  const ResizePadOp op(16, 16, 12, 3, 2);
  const Tensor<double> x = Tensor<double>::constant(Shape{1, 1, 16, 16}, 0.25);
  const Tensor<double> y = op.apply(x);
  for (Index h = 3; h < 15; ++h)
    for (Index w = 2; w < 14; ++w) EXPECT_NEAR(y(0, 0, h, w), 0.25, 1e-15);
}
