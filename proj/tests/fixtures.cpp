#include "fixtures.hpp"

#include "rhp/dataset.hpp"

namespace rhp::test {

const ToyFixture& toy_fixture() {
  static const ToyFixture fixture = [] {
    ToyFixture f;
    const LabeledSet<Real> train = generate_synthetic_dataset(10, 100, 32, 41);
    f.module_set = generate_synthetic_dataset(10, 40, 32, 42);
    f.eval_set = generate_synthetic_dataset(10, 20, 32, 43);
    f.model = build_toy_cnn<Real>(10, Shape{1, 3, 32, 32}, 44, "fixture");
    ClassifierTrainConfig<Real> cfg;
    cfg.epochs = 8;
    cfg.seed = 45;
    train_classifier(f.model, train, cfg);
    f.eval_error = top1_error(f.model, f.eval_set, 0);
    return f;
  }();
  return fixture;
}

}  // namespace rhp::test
