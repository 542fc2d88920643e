#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "rhp/region_partition.hpp"
#include "rhp/tensor.hpp"

namespace rhp {

/// Pixel scale of the 255-unit epsilon convention.
inline constexpr double kPixelScale = 255.0;

/// A single C x H x W perturbation (stored as a 1 x C x H x W tensor) plus provenance.
struct PerturbationArtifact {
  Tensor<Real> tensor;
  double epsilon = 0.0;  // 255-scale
  std::optional<RegionSplitSpec> split;
  std::string source_model_id;
  std::string method;
  std::uint64_t seed = 0;

  double radius() const { return epsilon / kPixelScale; }

  /// True when every value lies within the epsilon ball (normalized units).
  bool within_ball(double tol = 1e-9) const {
    return tensor.size() == 0 ||
           tensor.array().abs().maxCoeff() <= static_cast<Real>(radius() + tol);
  }
};

}  // namespace rhp
