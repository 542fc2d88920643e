#pragma once

#include "rhp/model_zoo.hpp"

namespace rhp::test {

/// A small naturally trained classifier plus disjoint module-training and eval sets,
/// built once per process.
struct ToyFixture {
  ToyCnn<Real> model;
  LabeledSet<Real> module_set;
  LabeledSet<Real> eval_set;
  double eval_error = 0.0;
};

const ToyFixture& toy_fixture();

}  // namespace rhp::test
