#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rhp/eval_harness.hpp"
#include "rhp/gradient_transformer.hpp"
#include "rhp/model_zoo.hpp"
#include "rhp/perturbation.hpp"
#include "rhp/transform_trainer.hpp"

namespace rhp {

using Json = nlohmann::ordered_json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr int kFormatVersion = 1;

/// On-disk container shared by artifacts and checkpoints:
///
///   rhp-container <version>\n
///   header <n>\n  followed by n bytes of JSON and a newline
///   payload <m>\n followed by m bytes of little-endian float32
struct Container {
  Json header;
  std::vector<float> payload;
};

void write_container(const std::filesystem::path& path, const Json& header,
                     const std::vector<float>& payload);
/// Checks magic, version, byte counts and `header["kind"] == kind`.
Container read_container(const std::filesystem::path& path, const std::string& kind);

/// ISO-8601 UTC. Taken from SOURCE_DATE_EPOCH when set so reruns are byte-identical.
std::string creation_timestamp();

Json split_to_json(const RegionSplitSpec& split);
RegionSplitSpec split_from_json(const Json& j);

void save_artifact(const std::filesystem::path& path, const PerturbationArtifact& artifact);
PerturbationArtifact load_artifact(const std::filesystem::path& path);

/// Classifier weights plus everything needed to rebuild the network.
void save_classifier(const std::filesystem::path& path, const ToyCnn<Real>& model,
                     const Json& extra = Json::object());
ToyCnn<Real> load_classifier(const std::filesystem::path& path, Json* header = nullptr);

/// Transformer weights, moving statistics and the split, bound to an image size.
void save_transformer(const std::filesystem::path& path, const TransformerParams<Real>& params,
                      Index height, Index width, const Json& extra = Json::object());
TransformerParams<Real> load_transformer(const std::filesystem::path& path,
                                         Json* header = nullptr);

Json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const Json& j);
Json to_json(const TrainStep& s);
TrainStep train_step_from_json(const Json& j);
Json to_json(const HomogeneityReport& r);

/// One compact JSON record per line.
void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& records);
std::vector<Json> read_jsonl(const std::filesystem::path& path);

/// Summary table of eval reports; error rates in percentage points.
void write_report_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);

/// Pixel = round(255 * (p / (2 eps) + 0.5)) clipped to [0, 255], written as binary PPM.
/// Single-channel artifacts are replicated to gray.
void export_perturbation_image(const PerturbationArtifact& artifact,
                               const std::filesystem::path& path);

/// Fixed-precision decimal text for CSV cells so reruns give identical bytes.
std::string format_number(double v);

}  // namespace rhp
