#include "rhp/region_partition.hpp"

#include <algorithm>
#include <map>

namespace rhp {

std::string to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::vertical:
      return "vertical";
    case SplitKind::horizontal:
      return "horizontal";
    case SplitKind::grid:
      return "grid";
    case SplitKind::slash:
      return "slash";
  }
  return "unknown";
}

SplitKind parse_split_kind(const std::string& name) {
  if (name == "vertical") return SplitKind::vertical;
  if (name == "horizontal") return SplitKind::horizontal;
  if (name == "grid") return SplitKind::grid;
  if (name == "slash") return SplitKind::slash;
  throw PartitionError("unknown split kind '" + name + "'");
}

RegionPartition::RegionPartition(Index height, Index width, std::vector<std::int32_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  if (height <= 0 || width <= 0) throw PartitionError("partition needs a positive image size");
  if (static_cast<Index>(labels_.size()) != height * width) {
    throw PartitionError("label map size does not match image size");
  }
  const auto [lo, hi] = std::minmax_element(labels_.begin(), labels_.end());
  if (*lo < 0) throw PartitionError("negative region label");
  k_ = *hi + 1;
  sizes_.assign(k_, 0);
  members_.assign(k_, {});
  for (Index p = 0; p < static_cast<Index>(labels_.size()); ++p) {
    ++sizes_[labels_[p]];
    members_[labels_[p]].push_back(p);
  }
  for (int k = 0; k < k_; ++k) {
    if (sizes_[k] == 0) throw EmptyRegionError("region " + std::to_string(k) + " is empty");
  }
}

namespace {

// Slash coordinate 2h - w shifted to start at 0; lines of constant value have slope 0.5.
Index slash_coord(Index h, Index w, Index width) { return 2 * h - w + (width - 1); }
Index slash_span(Index height, Index width) { return 2 * (height - 1) + width; }

std::pair<int, int> grid_dims(const RegionSplitSpec& spec, Index height, Index width) {
  switch (spec.kind) {
    case SplitKind::grid:
      return {spec.grid_h, spec.grid_w};
    case SplitKind::vertical:
      // More regions than columns: each column is split horizontally as well.
      if (spec.k_regions > width) return {static_cast<int>(spec.k_regions / width), int(width)};
      return {1, spec.k_regions};
    case SplitKind::horizontal:
      if (spec.k_regions > height) return {int(height), static_cast<int>(spec.k_regions / height)};
      return {spec.k_regions, 1};
    case SplitKind::slash:
      break;
  }
  return {0, 0};
}

}  // namespace

void validate_split(const RegionSplitSpec& spec, Index height, Index width) {
  if (height <= 0 || width <= 0) throw PartitionError("image size must be positive");
  if (spec.kind == SplitKind::slash) {
    if (spec.slash_band_width < 0) throw PartitionError("slash band width must be positive");
    if (spec.slash_band_width == 0) {
      if (spec.k_regions < 1) throw PartitionError("k_regions must be >= 1");
      if (spec.k_regions > slash_span(height, width)) {
        throw PartitionError("slash split has more regions than slash bands");
      }
    }
    return;
  }
  if (spec.kind == SplitKind::grid) {
    if (spec.grid_h < 1 || spec.grid_w < 1) throw PartitionError("grid needs K_h, K_w >= 1");
    if (spec.grid_h > height || spec.grid_w > width) {
      throw PartitionError("grid exceeds image size");
    }
    if (spec.k_regions != 0 && spec.k_regions != spec.grid_h * spec.grid_w) {
      throw PartitionError("grid k_regions must equal K_h * K_w");
    }
    return;
  }
  if (spec.k_regions < 1) throw PartitionError("k_regions must be >= 1");
  if (spec.k_regions > height * width) throw PartitionError("k_regions exceeds pixel count");
  const Index lines = spec.kind == SplitKind::vertical ? width : height;
  if (spec.k_regions > lines && spec.k_regions % lines != 0) {
    throw PartitionError("k_regions above " + std::to_string(lines) +
                         " must be a multiple of it");
  }
}

RegionPartition build_partition(const RegionSplitSpec& spec, Index height, Index width) {
  validate_split(spec, height, width);
  std::vector<std::int32_t> labels(height * width);

  if (spec.kind == SplitKind::slash) {
    std::vector<std::int64_t> raw(labels.size());
    for (Index h = 0; h < height; ++h) {
      for (Index w = 0; w < width; ++w) {
        raw[h * width + w] = spec.slash_band_width > 0
                                 ? (2 * h - w + 2 * width) / spec.slash_band_width
                                 : slash_coord(h, w, width) * spec.k_regions /
                                       slash_span(height, width);
      }
    }
    std::map<std::int64_t, std::int32_t> dense;
    for (auto r : raw) dense.emplace(r, 0);
    std::int32_t next = 0;
    for (auto& [band, idx] : dense) idx = next++;
    for (std::size_t p = 0; p < raw.size(); ++p) labels[p] = dense[raw[p]];
    if (spec.slash_band_width == 0 && next != spec.k_regions) {
      throw EmptyRegionError("slash quantization produced " + std::to_string(next) +
                             " regions, expected " + std::to_string(spec.k_regions));
    }
    if (spec.slash_band_width > 0 && spec.k_regions != 0 && next != spec.k_regions) {
      throw PartitionError("slash band width yields " + std::to_string(next) +
                           " regions, spec says " + std::to_string(spec.k_regions));
    }
    return RegionPartition(height, width, std::move(labels));
  }

  const auto [kh, kw] = grid_dims(spec, height, width);
  for (Index h = 0; h < height; ++h) {
    for (Index w = 0; w < width; ++w) {
      const Index row = h * kh / height;
      const Index col = w * kw / width;
      labels[h * width + w] = static_cast<std::int32_t>(row * kw + col);
    }
  }
  RegionPartition out(height, width, std::move(labels));
  if (out.k_regions() != kh * kw) {
    throw EmptyRegionError("quantization left region indices unused");
  }
  return out;
}

std::vector<std::vector<PixelCoord>> region_pixel_sets(const RegionPartition& partition) {
  std::vector<std::vector<PixelCoord>> sets(partition.k_regions());
  for (int k = 0; k < partition.k_regions(); ++k) {
    sets[k].reserve(partition.members(k).size());
    for (Index p : partition.members(k)) {
      sets[k].emplace_back(p / partition.width(), p % partition.width());
    }
  }
  return sets;
}

}  // namespace rhp
