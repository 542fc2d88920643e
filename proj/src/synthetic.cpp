#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "rhp/dataset.hpp"

namespace rhp {

namespace {

enum class ShapeKind { disk, square, triangle, cross, ring };

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0:
      return {v, t, p};
    case 1:
      return {q, v, p};
    case 2:
      return {p, v, t};
    case 3:
      return {p, q, v};
    case 4:
      return {t, p, v};
    default:
      return {v, p, q};
  }
}

// Shape membership in the shape's own frame, coordinates scaled by the radius.
bool inside(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::disk:
      return u * u + v * v <= 1.0;
    case ShapeKind::square:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::triangle: {
      // Equilateral, apex up, circumradius 1.
      const double s3 = std::sqrt(3.0);
      return v >= -0.5 && (s3 * u - v) <= 1.0 && (-s3 * u - v) <= 1.0;
    }
    case ShapeKind::cross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) ||
             (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case ShapeKind::ring: {
      const double d = u * u + v * v;
      return d <= 1.0 && d >= 0.36;
    }
  }
  return false;
}

// Same rounding as decoding an 8-bit file, so in-memory and on-disk images agree bit for bit.
Real quantize(double v) {
  return static_cast<Real>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / Real(255);
}

}  // namespace

LabeledSet<Real> generate_synthetic_dataset(int class_count, Index per_class, Index size,
                                            std::uint64_t seed) {
  if (class_count < 1 || class_count > 10) {
    throw std::invalid_argument("synthetic generator supports 1..10 classes");
  }
  if (per_class < 1) throw std::invalid_argument("per_class must be >= 1");
  if (size < 8) throw std::invalid_argument("synthetic images must be at least 8 pixels wide");

  const Index count = per_class * class_count;
  LabeledSet<Real> out;
  out.class_count = class_count;
  out.images = Tensor<Real>(Shape{count, 3, size, size});
  out.labels.resize(count);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  constexpr int kSuper = 3;

  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % class_count);
    out.labels[i] = label;
    const auto shape = static_cast<ShapeKind>(label / 2);
    const bool warm = label % 2 == 0;

    const double hue = warm ? uni(-0.04, 0.12) : uni(0.50, 0.68);
    const Rgb fg = hsv_to_rgb(hue, uni(0.65, 1.0), uni(0.65, 1.0));
    const double gray = uni(0.25, 0.6);
    const Rgb bg{gray + uni(-0.05, 0.05), gray + uni(-0.05, 0.05), gray + uni(-0.05, 0.05)};
    const double cx = size * uni(0.38, 0.62), cy = size * uni(0.38, 0.62);
    const double radius = size * uni(0.22, 0.32);
    const double angle = shape == ShapeKind::disk || shape == ShapeKind::ring
                             ? 0.0
                             : uni(-0.35, 0.35) * std::numbers::pi;
    const double ca = std::cos(angle), sa = std::sin(angle);

    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper - cx;
            const double py = y + (sy + 0.5) / kSuper - cy;
            const double u = (ca * px + sa * py) / radius;
            const double v = (-sa * px + ca * py) / radius;
            // Image rows grow downward; flip so "apex up" reads naturally.
            if (inside(shape, u, -v)) ++hits;
          }
        }
        const double a = double(hits) / (kSuper * kSuper);
        const double px[3] = {a * fg.r + (1 - a) * bg.r, a * fg.g + (1 - a) * bg.g,
                              a * fg.b + (1 - a) * bg.b};
        for (int c = 0; c < 3; ++c) {
          out.images(i, c, y, x) = quantize(px[c] + noise(rng));
        }
      }
    }
  }
  return out;
}

DatasetManifest write_synthetic_split(const std::filesystem::path& root, SplitTag split,
                                      int class_count, Index per_class, Index size,
                                      std::uint64_t seed) {
  const LabeledSet<Real> data = generate_synthetic_dataset(class_count, per_class, size, seed);
  const std::string tag = to_string(split);
  std::filesystem::create_directories(root / tag);
  DatasetManifest m;
  m.root = root;
  m.class_count = class_count;
  m.split = split;
  for (Index i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05lld.ppm", static_cast<long long>(i));
    const std::string rel = tag + "/" + name;
    write_ppm(root / rel, data.images.slice(i, 1));
    m.entries.push_back({rel, data.labels[i]});
  }
  write_manifest(root / (tag + ".csv"), m);
  return m;
}

}  // namespace rhp
