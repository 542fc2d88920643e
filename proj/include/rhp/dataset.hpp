#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rhp/model_zoo.hpp"

namespace rhp {

enum class SplitTag { train_classifier, train_module, eval };

std::string to_string(SplitTag tag);
SplitTag parse_split_tag(const std::string& name);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
};

/// CSV manifest (`path,label`) with `# key: value` metadata lines for the split tag and
/// class count.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int class_count = 0;
  SplitTag split = SplitTag::eval;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Binary PPM (P6, maxval 255) as a 1 x 3 x H x W tensor in [0, 1].
Tensor<Real> read_ppm(const std::filesystem::path& path);
/// Writes one image (1 x 3 x H x W); values are clipped and rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const Tensor<Real>& image);

struct LoadedDataset {
  DatasetManifest manifest;
  LabeledSet<Real> data;
};

/// Loads every manifest entry in order. Empty manifests give an empty set.
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

/// Seeded colored-shape images: 5 shapes x 2 color families, jittered position, scale
/// and hue over a noisy background. Classes are interleaved so every prefix of
/// 10 * m images is balanced. Pixel values are exact multiples of 1/255.
LabeledSet<Real> generate_synthetic_dataset(int class_count, Index per_class, Index size,
                                            std::uint64_t seed);

/// Renders a synthetic split to `root/<split>/NNNNN.ppm` plus `root/<split>.csv`.
DatasetManifest write_synthetic_split(const std::filesystem::path& root, SplitTag split,
                                      int class_count, Index per_class, Index size,
                                      std::uint64_t seed);

}  // namespace rhp
