#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rhp/tensor.hpp"

namespace rhp {

enum class SplitKind { vertical, horizontal, grid, slash };

std::string to_string(SplitKind kind);
SplitKind parse_split_kind(const std::string& name);

/// Describes a region split function r(h, w).
///
/// `k_regions` is the requested region count K. For `grid`, `grid_h` x `grid_w`
/// cells are used and K must equal their product (K may be left 0 to derive it).
/// For `slash`, bands follow lines of slope 0.5; with a positive `slash_band_width`
/// the band of (h, w) is floor((2h - w + 2W) / width), otherwise the slash
/// coordinate is quantized into K equal bands.
struct RegionSplitSpec {
  SplitKind kind = SplitKind::vertical;
  int k_regions = 1;
  int grid_h = 0;
  int grid_w = 0;
  int slash_band_width = 0;

  static RegionSplitSpec vertical(int k) { return {SplitKind::vertical, k, 0, 0, 0}; }
  static RegionSplitSpec horizontal(int k) { return {SplitKind::horizontal, k, 0, 0, 0}; }
  static RegionSplitSpec grid(int kh, int kw) { return {SplitKind::grid, kh * kw, kh, kw, 0}; }
  static RegionSplitSpec slash(int k) { return {SplitKind::slash, k, 0, 0, 0}; }
  static RegionSplitSpec slash_width(int band_width) {
    return {SplitKind::slash, 0, 0, 0, band_width};
  }

  friend bool operator==(const RegionSplitSpec&, const RegionSplitSpec&) = default;
};

class PartitionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when quantization leaves some region index unused.
class EmptyRegionError : public PartitionError {
 public:
  using PartitionError::PartitionError;
};

/// Pixel-to-region labeling with dense zero-based region indices.
class RegionPartition {
 public:
  RegionPartition() = default;
  RegionPartition(Index height, Index width, std::vector<std::int32_t> labels);

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index pixel_count() const { return height_ * width_; }
  int k_regions() const { return k_; }

  std::int32_t label(Index h, Index w) const { return labels_[h * width_ + w]; }
  const std::vector<std::int32_t>& label_map() const { return labels_; }
  const std::vector<Index>& region_sizes() const { return sizes_; }

  /// Flat pixel offsets (h * W + w) of region k, ascending.
  const std::vector<Index>& members(int k) const { return members_[k]; }

  friend bool operator==(const RegionPartition& a, const RegionPartition& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.labels_ == b.labels_;
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  int k_ = 0;
  std::vector<std::int32_t> labels_;
  std::vector<Index> sizes_;
  std::vector<std::vector<Index>> members_;
};

void validate_split(const RegionSplitSpec& spec, Index height, Index width);

RegionPartition build_partition(const RegionSplitSpec& spec, Index height, Index width);

using PixelCoord = std::pair<Index, Index>;

/// Coordinates (h, w) of every region, in region order.
std::vector<std::vector<PixelCoord>> region_pixel_sets(const RegionPartition& partition);

}  // namespace rhp
