#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "rhp/cli.hpp"
#include "rhp/dataset.hpp"
#include "rhp/persistence.hpp"
#include "test_util.hpp"

using namespace rhp;
namespace fs = std::filesystem;
using rhp::test::scratch_dir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run(std::vector<std::string> args) { return cli(args); }

// Tiny end-to-end pipeline; returns every produced file keyed by its path under `root`.
std::map<std::string, std::string> pipeline(const fs::path& root) {
  const std::string r = root.string();
  EXPECT_EQ(run({"generate-data", "--out", r + "/data", "--seed", "3", "--size", "16",
                 "--classifier-per-class", "6", "--module-per-class", "4", "--eval-per-class", "2"}), 0);
  EXPECT_EQ(run({"train-classifier", "--out", r + "/clf", "--seed", "4", "--manifest",
                 r + "/data/train_classifier.csv", "--epochs", "1"}), 0);
  EXPECT_EQ(run({"train-rhp", "--out", r + "/rhp", "--seed", "5", "--model", r + "/clf/model.ckpt",
                 "--manifest", r + "/data/train_module.csv", "--epochs", "2", "--k", "4",
                 "--keep-epoch-checkpoints"}), 0);
  EXPECT_EQ(run({"make-universal", "--out", r + "/uni", "--transformer", r + "/rhp/transformer.ckpt"}), 0);
  EXPECT_EQ(run({"attack", "--out", r + "/fgsm", "--method", "fgsm", "--model", r + "/clf/model.ckpt",
                 "--manifest", r + "/data/eval.csv"}), 0);
  EXPECT_EQ(run({"eval", "--out", r + "/eval", "--manifest", r + "/data/eval.csv", "--target",
                 r + "/clf/model.ckpt", "--artifact", r + "/uni/universal.rhpa", "--adv-manifest",
                 r + "/fgsm/adversarial.csv", "--exclude-manifest", r + "/data/train_module.csv",
                 "--exclude-manifest", r + "/data/train_classifier.csv"}), 0);
  EXPECT_EQ(run({"export-perturbation", "--out", r + "/png", "--artifact", r + "/uni/universal.rhpa"}), 0);
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::string bytes = slurp(e.path());
    // Config snapshots name the output directory; compare them relative to the root.
    for (auto pos = bytes.find(r); pos != std::string::npos; pos = bytes.find(r)) bytes.replace(pos, r.size(), "<root>");
    files[fs::relative(e.path(), root).string()] = bytes;
  }
  return files;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"--help"}), 0);
  const std::string out = testing::internal::GetCapturedStdout();
  EXPECT_NE(out.find("train-rhp"), std::string::npos);
  EXPECT_NE(out.find("make-universal"), std::string::npos);
}

TEST(Cli, BinaryHelp) {
  EXPECT_EQ(std::system((std::string("\"") + RHP_TOOL + "\" --help > /dev/null").c_str()), 0);
  EXPECT_NE(std::system((std::string("\"") + RHP_TOOL + "\" attack --bogus 2> /dev/null").c_str()), 0);
}

TEST(Cli, UsageErrors) {
  const auto dir = scratch_dir("cli_usage");
  testing::internal::CaptureStderr();
  EXPECT_NE(run({}), 0);
  EXPECT_NE(run({"frobnicate"}), 0);
  EXPECT_NE(run({"generate-data", "--out", dir.string(), "--unknown-flag", "1"}), 0);
  EXPECT_NE(run({"generate-data"}), 0);  // --out is required
  EXPECT_NE(run({"attack", "--out", dir.string(), "--method", "nope"}), 0);
  std::ofstream(dir / "bad.toml") << "this is [not valid\n";
  EXPECT_NE(run({"generate-data", "--config", (dir / "bad.toml").string(), "--out", dir.string()}), 0);
  testing::internal::GetCapturedStderr();
}

TEST(Cli, SmokePipelineProducesEverything) {
  setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  const auto root = scratch_dir("cli_smoke");
  const auto files = pipeline(root);
  for (const char* f : {"data/eval.csv", "data/train_module.csv", "clf/model.ckpt", "clf/train_report.json",
                        "rhp/transformer.ckpt", "rhp/train_log.jsonl", "rhp/checkpoints/epoch_001.ckpt",
                        "uni/universal.rhpa", "uni/homogeneity.json", "fgsm/adversarial.csv",
                        "fgsm/attack.json", "fgsm/images/00019.ppm", "eval/report.jsonl", "eval/report.csv",
                        "png/perturbation.ppm", "eval/resolved_config.toml"}) {
    EXPECT_TRUE(files.count(f)) << f;
  }
  for (const auto& [name, bytes] : files) EXPECT_NE(fs::path(name).filename().string(), "FAILED") << name;

  const auto reports = read_jsonl(root / "eval/report.jsonl");
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0]["attack_id"], "rhp-U@natural");
  EXPECT_EQ(reports[1]["attack_id"], "fgsm@natural");
  for (const auto& r : reports) {
    EXPECT_NEAR(r["error_increase"].get<double>(),
                r["adv_error"].get<double>() - r["clean_error"].get<double>(), 1e-12);
  }
  const auto log = read_jsonl(root / "rhp/train_log.jsonl");
  EXPECT_EQ(log.size(), 4u);  // 40 images at batch 32 is two steps, times two epochs
  const PerturbationArtifact u = load_artifact(root / "uni/universal.rhpa");
  EXPECT_TRUE((u.tensor.array().abs() == Real(16.0 / 255.0)).all());
  unsetenv("SOURCE_DATE_EPOCH");
}

TEST(Cli, PipelineIsByteReproducible) {
  setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  const auto a = pipeline(scratch_dir("cli_repro_a"));
  const auto b = pipeline(scratch_dir("cli_repro_b"));
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_TRUE(bytes == b.at(name)) << name << " differs";
  }
  unsetenv("SOURCE_DATE_EPOCH");
}

TEST(Cli, RefusesToEvaluateOnTrainingSplits) {
  const auto root = scratch_dir("cli_hygiene");
  const std::string r = root.string();
  ASSERT_EQ(run({"generate-data", "--out", r + "/data", "--size", "16", "--classifier-per-class", "2",
                 "--module-per-class", "2", "--eval-per-class", "1"}), 0);
  ASSERT_EQ(run({"attack", "--out", r + "/rp", "--method", "rp", "--size", "16", "--k", "2"}), 0);
  testing::internal::CaptureStderr();
  const int rc = run({"eval", "--out", r + "/bad", "--manifest", r + "/data/train_module.csv",
                      "--target", r + "/none.ckpt", "--artifact", r + "/rp/universal.rhpa"});
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(rc, 2);
  EXPECT_NE(err.find("refusing"), std::string::npos);
  EXPECT_NE(slurp(root / "bad/FAILED").find("train_module"), std::string::npos);

  // An eval manifest that reuses a training image is refused as well.
  fs::copy_file(root / "data/train_module/00000.ppm", root / "data/eval_leak.ppm");
  std::ofstream(root / "data/leaky.csv") << "# split: eval\n# class_count: 10\npath,label\n"
                                          << "train_module/00000.ppm,0\n";
  testing::internal::CaptureStderr();
  const int rc2 = run({"eval", "--out", r + "/leak", "--manifest", r + "/data/leaky.csv",
                       "--exclude-manifest", r + "/data/train_module.csv", "--target", r + "/none.ckpt",
                       "--artifact", r + "/rp/universal.rhpa"});
  testing::internal::GetCapturedStderr();
  EXPECT_EQ(rc2, 2);
  EXPECT_TRUE(fs::exists(root / "leak/FAILED"));
}

TEST(Cli, FailureLeavesMarker) {
  const auto root = scratch_dir("cli_fail");
  testing::internal::CaptureStderr();
  const int rc = run({"make-universal", "--out", (root / "u").string(), "--transformer",
                      (root / "missing.ckpt").string()});
  testing::internal::GetCapturedStderr();
  EXPECT_EQ(rc, 1);
  EXPECT_TRUE(fs::exists(root / "u/FAILED"));
  EXPECT_FALSE(fs::exists(root / "u/universal.rhpa"));
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const auto root = scratch_dir("cli_config");
  const std::string r = root.string();
  ASSERT_EQ(run({"generate-data", "--out", r + "/data", "--size", "16", "--classifier-per-class", "2",
                 "--module-per-class", "1", "--eval-per-class", "1"}), 0);
  std::ofstream(root / "clf.toml") << "epochs = 3\nlr = 0.01\nmodel-id = \"from_config\"\n";
  ASSERT_EQ(run({"train-classifier", "--config", r + "/clf.toml", "--out", r + "/a", "--manifest",
                 r + "/data/train_classifier.csv"}), 0);
  ASSERT_EQ(run({"train-classifier", "--config", r + "/clf.toml", "--out", r + "/b", "--manifest",
                 r + "/data/train_classifier.csv", "--epochs", "1"}), 0);
  std::ifstream fa(root / "a/train_report.json"), fb(root / "b/train_report.json");
  const Json a = Json::parse(fa), b = Json::parse(fb);
  EXPECT_EQ(a["epoch_loss"].size(), 3u);
  EXPECT_EQ(b["epoch_loss"].size(), 1u);
  EXPECT_EQ(a["model_id"], "from_config");
  const std::string snap = slurp(root / "b/resolved_config.toml");
  EXPECT_NE(snap.find("epochs=1"), std::string::npos) << snap;
  EXPECT_NE(snap.find("lr=0.01"), std::string::npos) << snap;

  // The snapshot alone reproduces the run.
  ASSERT_EQ(run({"train-classifier", "--config", r + "/b/resolved_config.toml", "--out", r + "/c"}), 0);
  EXPECT_EQ(slurp(root / "b/model.ckpt"), slurp(root / "c/model.ckpt"));
}
