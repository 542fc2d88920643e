#include "rhp/cli.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "rhp/dataset.hpp"
#include "rhp/eval_harness.hpp"
#include "rhp/persistence.hpp"

namespace rhp {

namespace fs = std::filesystem;

namespace {

/// Bad input that is the caller's fault (wrong split tag, missing option combination).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  std::string config;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "TOML file of option values; command-line flags win");
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_option("--seed", c.seed, "Random seed");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// config_to_str minus the --config entry, so a snapshot replays on its own.
std::string snapshot(const CLI::App& sub) {
  std::istringstream in(sub.config_to_str(true, false));
  std::string out, line;
  while (std::getline(in, line)) {
    if (line.rfind("config=", 0) == 0) continue;
    out += line + "\n";
  }
  return out;
}

int run_in(const Common& c, const CLI::App* sub, const std::function<void(const fs::path&)>& body) {
  const fs::path out(c.out);
  const fs::path marker = out / "FAILED";
  try {
    fs::create_directories(out);
    write_text(marker, "incomplete\n");
    write_text(out / "resolved_config.toml",
               "# rhp " + sub->get_name() + "\n" + snapshot(*sub));
    body(out);
    fs::remove(marker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "rhp " << sub->get_name() << ": error: " << e.what() << '\n';
    std::error_code ec;
    if (fs::is_directory(out, ec)) {
      std::ofstream m(marker, std::ios::trunc);
      m << e.what() << '\n';
    }
    return dynamic_cast<const UsageError*>(&e) ? 2 : 1;
  }
}

LabeledSet<Real> load_split(const std::string& path, const std::set<SplitTag>& allowed,
                            const std::string& purpose, DatasetManifest* manifest = nullptr) {
  LoadedDataset d = load_dataset(path);
  if (!allowed.count(d.manifest.split)) {
    throw UsageError("refusing to " + purpose + " on '" + to_string(d.manifest.split) +
                     "' manifest " + path);
  }
  if (d.data.empty()) throw UsageError("manifest " + path + " lists no images");
  if (manifest) *manifest = std::move(d.manifest);
  return std::move(d.data);
}

const std::set<SplitTag> kTrainingSplits{SplitTag::train_classifier, SplitTag::train_module};
const std::set<SplitTag> kEvalSplit{SplitTag::eval};

// Eval images must not appear in any of the given training manifests.
void check_disjoint(const DatasetManifest& eval, const std::vector<std::string>& others) {
  std::set<fs::path> seen;
  for (const auto& e : eval.entries) seen.insert(fs::weakly_canonical(eval.root / e.path));
  for (const auto& path : others) {
    const DatasetManifest m = read_manifest(path);
    for (const auto& e : m.entries) {
      if (seen.count(fs::weakly_canonical(m.root / e.path))) {
        throw UsageError("eval image " + e.path + " is also listed in " + path);
      }
    }
  }
}

struct SplitOpts {
  std::string kind = "vertical";
  int k = 8;
  int grid_h = 0;
  int grid_w = 0;
  int band_width = 0;

  RegionSplitSpec spec() const {
    RegionSplitSpec s;
    s.kind = parse_split_kind(kind);
    s.k_regions = k;
    if (s.kind == SplitKind::grid) {
      if (grid_h < 1 || grid_w < 1) throw UsageError("grid split needs --grid-h and --grid-w");
      s = RegionSplitSpec::grid(grid_h, grid_w);
    }
    if (s.kind == SplitKind::slash && band_width > 0) s = RegionSplitSpec::slash_width(band_width);
    return s;
  }
};

void add_split(CLI::App* sub, SplitOpts& s) {
  sub->add_option("--split", s.kind, "Region split kind")
      ->check(CLI::IsMember({"vertical", "horizontal", "grid", "slash"}));
  sub->add_option("--k", s.k, "Region count K")->check(CLI::PositiveNumber);
  sub->add_option("--grid-h", s.grid_h, "Grid rows (grid split)");
  sub->add_option("--grid-w", s.grid_w, "Grid columns (grid split)");
  sub->add_option("--band-width", s.band_width, "Slash band width; 0 derives bands from K");
}

struct TrainOpts {
  TrainConfig cfg;
  std::string sign_mode = "straight_through";
  bool keep_epochs = false;
};

void add_train(CLI::App* sub, TrainOpts& t) {
  sub->add_option("--epochs", t.cfg.epochs, "Training epochs");
  sub->add_option("--steps", t.cfg.steps, "Exact optimizer steps; overrides --epochs when > 0");
  sub->add_option("--batch-size", t.cfg.batch_size, "Mini-batch size");
  sub->add_option("--lr", t.cfg.learning_rate, "Adam learning rate");
  sub->add_option("--beta1", t.cfg.adam_beta1, "Adam beta1");
  sub->add_option("--beta2", t.cfg.adam_beta2, "Adam beta2");
  sub->add_option("--epsilon", t.cfg.epsilon, "Perturbation budget (0-255 scale)");
  sub->add_option("--sign-mode", t.sign_mode, "Gradient path through sign()")
      ->check(CLI::IsMember({"straight_through", "linear"}));
  sub->add_option("--train-size", t.cfg.train_set_size, "Use the first N images; 0 uses all");
  sub->add_option("--probe-threshold", t.cfg.probe_threshold, "Probe ratio threshold");
  sub->add_option("--rn-momentum", t.cfg.rn_momentum, "Moving-statistics momentum");
  sub->add_option("--rn-stab-const", t.cfg.rn_stab_const, "Variance stabilizing constant");
  sub->add_flag("--keep-epoch-checkpoints", t.keep_epochs, "Also save one checkpoint per epoch");
}

struct Targets {
  std::vector<std::string> plain;
  std::vector<std::string> resize_pad;
  double resize_min = 0.9;
  double resize_max = 1.0;
};

void add_targets(CLI::App* sub, Targets& t, bool required) {
  auto* opt = sub->add_option("--target", t.plain, "Target classifier checkpoint (repeatable)");
  sub->add_option("--resize-pad-target", t.resize_pad,
                  "Classifier checkpoint wrapped in the random resize-pad defense (repeatable)");
  sub->add_option("--resize-min", t.resize_min, "Smallest resize factor of the defense");
  sub->add_option("--resize-max", t.resize_max, "Largest resize factor of the defense");
  if (required) opt->required();
}

// Owns the loaded models and wrappers so predictor pointers stay valid.
struct TargetSet {
  std::vector<std::unique_ptr<ToyCnn<Real>>> models;
  std::vector<std::unique_ptr<ResizePadDefense<Real>>> wrappers;
  std::vector<const Predictor<Real>*> predictors;

  explicit TargetSet(const Targets& t) {
    for (const auto& p : t.plain) {
      models.push_back(std::make_unique<ToyCnn<Real>>(load_classifier(p)));
      predictors.push_back(models.back().get());
    }
    for (const auto& p : t.resize_pad) {
      models.push_back(std::make_unique<ToyCnn<Real>>(load_classifier(p)));
      wrappers.push_back(std::make_unique<ResizePadDefense<Real>>(
          *models.back(), ResizeRange{t.resize_min, t.resize_max}));
      predictors.push_back(wrappers.back().get());
    }
    if (predictors.empty()) throw UsageError("no target model given");
  }
};

struct AttackInputs {
  std::vector<std::string> artifacts;
  std::vector<std::string> adv_manifests;
  double epsilon = 0.0;
};

void add_attack_inputs(CLI::App* sub, AttackInputs& a) {
  sub->add_option("--artifact", a.artifacts, "Universal perturbation file (repeatable)");
  sub->add_option("--adv-manifest", a.adv_manifests,
                  "Manifest of adversarial images aligned with --manifest (repeatable)");
  sub->add_option("--epsilon", a.epsilon,
                  "Budget (0-255 scale) audited for --adv-manifest images; default from attack.json");
}

std::vector<AttackSpec<Real>> build_attacks(const AttackInputs& in, const LabeledSet<Real>& clean) {
  std::vector<AttackSpec<Real>> out;
  for (const auto& path : in.artifacts) {
    const PerturbationArtifact art = load_artifact(path);
    std::string id = art.method + "-U";
    if (!art.source_model_id.empty()) id += "@" + art.source_model_id;
    out.push_back(universal_attack<Real>(id, art));
  }
  for (const auto& path : in.adv_manifests) {
    const LabeledSet<Real> adv = load_split(path, kEvalSplit, "evaluate");
    if (adv.labels != clean.labels || adv.images.shape() != clean.images.shape()) {
      throw UsageError("adversarial manifest " + path + " is not aligned with the eval manifest");
    }
    std::string id = fs::path(path).stem().string();
    double eps = in.epsilon;
    const fs::path meta = fs::path(path).parent_path() / "attack.json";
    if (fs::exists(meta)) {
      std::ifstream f(meta);
      const Json j = Json::parse(f);
      id = j.value("attack_id", id);
      if (eps <= 0.0) eps = j.value("epsilon", 0.0);
    }
    if (eps <= 0.0) throw UsageError("--epsilon is required to audit " + path);
    out.push_back({id, eps, [adv](const Tensor<Real>&, const std::vector<int>&) {
                     return adv.images;
                   }});
  }
  if (out.empty()) throw UsageError("give at least one --artifact or --adv-manifest");
  return out;
}

void write_reports(const fs::path& dir, const std::string& stem,
                   const std::vector<EvalReport>& reports) {
  std::vector<Json> records;
  for (const auto& r : reports) records.push_back(to_json(r));
  write_jsonl(dir / (stem + ".jsonl"), records);
  write_report_csv(dir / (stem + ".csv"), reports);
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------------------

void register_generate(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    int classes = 10;
    Index size = 32;
    Index classifier_per_class = 200;
    Index module_per_class = 200;
    Index eval_per_class = 50;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("generate-data", "Render the synthetic shape dataset splits");
  add_common(sub, o->c);
  sub->add_option("--classes", o->classes, "Class count (1-10)");
  sub->add_option("--size", o->size, "Image side length");
  sub->add_option("--classifier-per-class", o->classifier_per_class,
                  "Images per class in the classifier training split");
  sub->add_option("--module-per-class", o->module_per_class,
                  "Images per class in the module training split");
  sub->add_option("--eval-per-class", o->eval_per_class, "Images per class in the eval split");
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      // Distinct seeds per split keep the splits disjoint.
      write_synthetic_split(out, SplitTag::train_classifier, o->classes, o->classifier_per_class,
                            o->size, o->c.seed * 3 + 1);
      write_synthetic_split(out, SplitTag::train_module, o->classes, o->module_per_class,
                            o->size, o->c.seed * 3 + 2);
      write_synthetic_split(out, SplitTag::eval, o->classes, o->eval_per_class, o->size,
                            o->c.seed * 3 + 3);
    });
  });
}

void register_classifier(CLI::App& app, std::vector<std::function<int()>>& runs, bool adversarial) {
  struct Opts {
    Common c;
    std::string manifest;
    std::string model_id;
    ClassifierTrainConfig<Real> cfg;
    double epsilon = 16.0;
    int pgd_steps = 5;
  };
  auto o = std::make_shared<Opts>();
  o->model_id = adversarial ? "pgd" : "natural";
  auto* sub = adversarial
                  ? app.add_subcommand("adv-train", "Train a toy CNN on PGD adversarial examples")
                  : app.add_subcommand("train-classifier", "Train a toy CNN on clean images");
  add_common(sub, o->c);
  sub->add_option("--manifest", o->manifest, "Training manifest")->required();
  sub->add_option("--model-id", o->model_id, "Identifier stored in the checkpoint");
  sub->add_option("--epochs", o->cfg.epochs, "Training epochs");
  sub->add_option("--lr", o->cfg.learning_rate, "Adam learning rate");
  sub->add_option("--batch-size", o->cfg.batch_size, "Mini-batch size");
  if (adversarial) {
    sub->add_option("--epsilon", o->epsilon, "PGD budget (0-255 scale)");
    sub->add_option("--pgd-steps", o->pgd_steps, "PGD steps per batch");
  }
  runs.push_back([o, sub, adversarial] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      const LabeledSet<Real> data = load_split(o->manifest, kTrainingSplits, "train a classifier");
      ToyCnn<Real> model = build_toy_cnn<Real>(data.class_count, data.images.shape(), o->c.seed,
                                               o->model_id);
      ClassifierTrainConfig<Real> cfg = o->cfg;
      cfg.seed = o->c.seed;
      const auto result = adversarial
                              ? adv_train_classifier(model, data, o->epsilon, o->pgd_steps, cfg)
                              : train_classifier(model, data, cfg);
      Json extra;
      extra["seed"] = o->c.seed;
      extra["epochs"] = cfg.epochs;
      extra["train_error"] = result.train_error;
      if (adversarial) {
        extra["pgd_epsilon"] = o->epsilon;
        extra["pgd_steps"] = o->pgd_steps;
      }
      save_classifier(out / "model.ckpt", model, extra);
      Json report;
      report["model_id"] = model.id();
      report["epoch_loss"] = result.epoch_loss;
      report["train_error"] = result.train_error;
      write_json(out / "train_report.json", report);
    });
  });
}

void register_module_training(CLI::App& app, std::vector<std::function<int()>>& runs, bool tu) {
  struct Opts {
    Common c;
    std::string model;
    std::string manifest;
    SplitOpts split;
    TrainOpts train;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = tu ? app.add_subcommand("train-tu", "Train the module on uniform noise inputs")
                 : app.add_subcommand("train-rhp", "Train the gradient transformer module");
  add_common(sub, o->c);
  sub->add_option("--model", o->model, "Frozen source classifier checkpoint")->required();
  sub->add_option("--manifest", o->manifest, "Training manifest")->required();
  add_split(sub, o->split);
  add_train(sub, o->train);
  if (tu) {
    sub->add_option("--noise-scale", o->train.cfg.noise_scale,
                    "Noise half-width; negative derives it from the first batch's gradient");
  }
  runs.push_back([o, sub, tu] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      const ToyCnn<Real> model = load_classifier(o->model);
      const LabeledSet<Real> data = load_split(o->manifest, kTrainingSplits, "train the module");
      const RegionSplitSpec split = o->split.spec();
      const Index H = data.images.h(), W = data.images.w();
      auto partition = std::make_shared<const RegionPartition>(build_partition(split, H, W));
      TrainConfig cfg = o->train.cfg;
      cfg.seed = o->c.seed;
      cfg.sign_mode = parse_sign_mode(o->train.sign_mode);
      const TrainResult<Real> r = tu ? train_tu_variant(model, data, partition, split, cfg)
                                     : train_transformer(model, data, partition, split, cfg);
      Json extra;
      extra["method"] = tu ? "tu" : "rhp";
      extra["source_model_id"] = model.id();
      extra["epsilon"] = cfg.epsilon;
      extra["seed"] = cfg.seed;
      extra["train_set_size"] = cfg.train_set_size > 0 ? std::min(cfg.train_set_size, data.size())
                                                       : data.size();
      extra["optimizer_steps"] = r.log.steps.size();
      save_transformer(out / "transformer.ckpt", r.params, H, W, extra);
      std::vector<Json> log;
      for (const auto& s : r.log.steps) log.push_back(to_json(s));
      write_jsonl(out / "train_log.jsonl", log);
      if (o->train.keep_epochs) {
        fs::create_directories(out / "checkpoints");
        for (std::size_t e = 0; e < r.log.epoch_checkpoints.size(); ++e) {
          char name[32];
          std::snprintf(name, sizeof(name), "epoch_%03zu.ckpt", e);
          save_transformer(out / "checkpoints" / name, r.log.epoch_checkpoints[e], H, W, extra);
        }
      }
    });
  });
}

void register_make_universal(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    std::string transformer;
    double epsilon = 0.0;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("make-universal",
                                 "Evaluate a trained module on the zero input: eps * sign(T(0))");
  add_common(sub, o->c);
  sub->add_option("--transformer", o->transformer, "Module checkpoint")->required();
  sub->add_option("--epsilon", o->epsilon, "Budget (0-255 scale); default: the training budget");
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      Json h;
      const TransformerParams<Real> p = load_transformer(o->transformer, &h);
      const double eps = o->epsilon > 0.0 ? o->epsilon : h.value("epsilon", 16.0);
      const auto size = h.at("image_size").get<std::vector<Index>>();
      PerturbationArtifact art = universal_perturbation(p, eps, size[0], size[1]);
      art.method = h.value("method", std::string("rhp"));
      art.source_model_id = h.value("source_model_id", std::string());
      art.seed = h.value("seed", std::uint64_t(0));
      save_artifact(out / "universal.rhpa", art);
      write_json(out / "homogeneity.json", to_json(homogeneity_score(art.tensor, *p.partition)));
    });
  });
}

void register_attack(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    std::string method = "fgsm";
    std::string model;
    std::string manifest;
    std::string transformer;
    AttackConfig attack;
    SplitOpts split;
    OpConfig op;
    Index channels = 3;
    Index size = 32;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand(
      "attack", "Craft adversarial images (fgsm, mim, dim, rhp) or a universal perturbation (rp, op)");
  add_common(sub, o->c);
  sub->add_option("--method", o->method, "Attack method")
      ->check(CLI::IsMember({"fgsm", "mim", "dim", "rhp", "rp", "op"}));
  sub->add_option("--model", o->model, "Source classifier checkpoint");
  sub->add_option("--manifest", o->manifest,
                  "Images to attack, or op's optimization set");
  sub->add_option("--transformer", o->transformer, "Module checkpoint (rhp)");
  sub->add_option("--epsilon", o->attack.epsilon, "Budget (0-255 scale)");
  sub->add_option("--steps", o->attack.steps, "Iterations (mim, dim)");
  sub->add_option("--decay", o->attack.momentum_decay, "Momentum decay (mim, dim)");
  sub->add_option("--diversity-prob", o->attack.input_diversity_prob,
                  "Probability of the resize-pad transform (dim)");
  sub->add_option("--diversity-min", o->attack.diversity_range.lo, "Smallest resize factor (dim)");
  sub->add_option("--diversity-max", o->attack.diversity_range.hi, "Largest resize factor (dim)");
  add_split(sub, o->split);
  sub->add_option("--iterations", o->op.iterations, "Optimization steps (op)");
  sub->add_option("--step-size", o->op.step_size, "Step size in [0,1] pixel units; < 0 uses eps/10 (op)");
  sub->add_option("--op-batch-size", o->op.batch_size, "Mini-batch size (op)");
  sub->add_option("--channels", o->channels, "Channels of the perturbation (rp)");
  sub->add_option("--size", o->size, "Side length of the perturbation (rp)");
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      AttackConfig cfg = o->attack;
      cfg.seed = o->c.seed;
      cfg.validate();
      const std::string& m = o->method;

      if (m == "rp" || m == "op") {
        const RegionSplitSpec split = o->split.spec();
        PerturbationArtifact art;
        if (m == "rp") {
          const RegionPartition part = build_partition(split, o->size, o->size);
          art = rp_baseline(part, o->channels, cfg.epsilon, o->c.seed, split);
        } else {
          if (o->model.empty() || o->manifest.empty()) {
            throw UsageError("op needs --model and --manifest");
          }
          const ToyCnn<Real> model = load_classifier(o->model);
          const LabeledSet<Real> data = load_split(o->manifest, kTrainingSplits, "optimize op");
          const RegionPartition part = build_partition(split, data.images.h(), data.images.w());
          OpConfig op = o->op;
          op.seed = o->c.seed;
          art = op_baseline(model, data, part, cfg.epsilon, op, split);
          art.source_model_id = model.id();
        }
        save_artifact(out / "universal.rhpa", art);
        return;
      }

      if (o->model.empty() || o->manifest.empty()) throw UsageError(m + " needs --model and --manifest");
      const ToyCnn<Real> model = load_classifier(o->model);
      DatasetManifest manifest;
      const LabeledSet<Real> data = load_split(
          o->manifest, {SplitTag::eval, SplitTag::train_classifier, SplitTag::train_module},
          "attack", &manifest);
      Tensor<Real> adv;
      if (m == "fgsm") {
        adv = fgsm(model, data.images, data.labels, cfg);
      } else if (m == "mim") {
        adv = mim(model, data.images, data.labels, cfg);
      } else if (m == "dim") {
        adv = dim(model, data.images, data.labels, cfg);
      } else {
        if (o->transformer.empty()) throw UsageError("rhp needs --transformer");
        const TransformerParams<Real> p = load_transformer(o->transformer);
        adv = rhp_attack(model, p, data.images, data.labels, cfg);
      }
      audit_budget(data.images, adv, cfg.epsilon);

      DatasetManifest written;
      written.root = out;
      written.class_count = manifest.class_count;
      written.split = manifest.split;
      fs::create_directories(out / "images");
      for (Index i = 0; i < data.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "images/%05lld.ppm", static_cast<long long>(i));
        write_ppm(out / name, adv.slice(i, 1));
        written.entries.push_back({name, data.labels[i]});
      }
      write_manifest(out / "adversarial.csv", written);
      Json meta;
      meta["attack_id"] = m + "@" + model.id();
      meta["method"] = m;
      meta["epsilon"] = cfg.epsilon;
      meta["source_model_id"] = model.id();
      meta["seed"] = o->c.seed;
      meta["image_count"] = data.size();
      write_json(out / "attack.json", meta);
    });
  });
}

void register_eval(CLI::App& app, std::vector<std::function<int()>>& runs, bool matrix) {
  struct Opts {
    Common c;
    std::string manifest;
    std::vector<std::string> exclude;
    Targets targets;
    AttackInputs attacks;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = matrix ? app.add_subcommand("transfer-matrix",
                                          "Error increase of every attack on every target")
                     : app.add_subcommand("eval", "Error increase of attacks on one target");
  add_common(sub, o->c);
  sub->add_option("--manifest", o->manifest, "Eval manifest (must be tagged eval)")->required();
  sub->add_option("--exclude-manifest", o->exclude,
                  "Training manifests whose images must not appear in the eval set");
  add_targets(sub, o->targets, false);
  add_attack_inputs(sub, o->attacks);
  runs.push_back([o, sub, matrix] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      DatasetManifest manifest;
      const LabeledSet<Real> clean = load_split(o->manifest, kEvalSplit, "evaluate", &manifest);
      check_disjoint(manifest, o->exclude);
      const TargetSet targets(o->targets);
      if (!matrix && targets.predictors.size() != 1) {
        throw UsageError("eval takes exactly one target; use transfer-matrix for several");
      }
      const auto attacks = build_attacks(o->attacks, clean);
      write_reports(out, matrix ? "transfer" : "report",
                    transfer_matrix(targets.predictors, attacks, clean, o->c.seed));
    });
  });
}

void register_probe_report(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    std::vector<std::string> logs;
    std::vector<std::string> labels;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("probe-report",
                                 "Per-epoch probe fractions and loss from training logs (CSV)");
  add_common(sub, o->c);
  sub->add_option("--log", o->logs, "train_log.jsonl (repeatable)")->required();
  sub->add_option("--label", o->labels, "Run label per --log; default: the log's directory name");
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      if (!o->labels.empty() && o->labels.size() != o->logs.size()) {
        throw UsageError("give one --label per --log");
      }
      std::ofstream steps(out / "probe_steps.csv"), epochs(out / "probe_epochs.csv");
      steps << "run,iteration,epoch,loss,frac_b_over_a,frac_c_over_d\n";
      epochs << "run,epoch,steps,mean_loss,frac_b_over_a,frac_c_over_d\n";
      for (std::size_t i = 0; i < o->logs.size(); ++i) {
        const std::string label = o->labels.empty()
                                      ? fs::path(o->logs[i]).parent_path().filename().string()
                                      : o->labels[i];
        TrainLog<Real> log;
        for (const auto& j : read_jsonl(o->logs[i])) log.steps.push_back(train_step_from_json(j));
        for (const auto& s : log.steps) {
          steps << label << ',' << s.iteration << ',' << s.epoch << ',' << format_number(s.loss)
                << ',' << format_number(s.frac_b_over_a) << ',' << format_number(s.frac_c_over_d)
                << '\n';
        }
        for (int e = 0; e <= log.last_epoch(); ++e) {
          const auto n = std::count_if(log.steps.begin(), log.steps.end(),
                                       [e](const TrainStep& s) { return s.epoch == e; });
          epochs << label << ',' << e << ',' << n << ','
                 << format_number(log.epoch_mean(e, &TrainStep::loss)) << ','
                 << format_number(log.epoch_mean(e, &TrainStep::frac_b_over_a)) << ','
                 << format_number(log.epoch_mean(e, &TrainStep::frac_c_over_d)) << '\n';
        }
      }
      if (!steps || !epochs) throw std::runtime_error("failed writing probe tables");
    });
  });
}

void register_sweep(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    std::string model;
    std::string manifest;
    std::string eval_manifest;
    std::string kind = "vertical";
    std::vector<int> k_values{1, 2, 4, 8, 16};
    Targets targets;
    TrainOpts train;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("sweep-k", "Train one module per K and evaluate its universal perturbation");
  add_common(sub, o->c);
  sub->add_option("--model", o->model, "Frozen source classifier checkpoint")->required();
  sub->add_option("--manifest", o->manifest, "Module training manifest")->required();
  sub->add_option("--eval-manifest", o->eval_manifest, "Eval manifest")->required();
  sub->add_option("--split", o->kind, "Region split kind")
      ->check(CLI::IsMember({"vertical", "horizontal", "slash"}));
  sub->add_option("--k-values", o->k_values, "Region counts to sweep")->delimiter(',');
  add_targets(sub, o->targets, true);
  add_train(sub, o->train);
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      const ToyCnn<Real> model = load_classifier(o->model);
      const LabeledSet<Real> train = load_split(o->manifest, kTrainingSplits, "train the module");
      const LabeledSet<Real> eval = load_split(o->eval_manifest, kEvalSplit, "evaluate");
      const TargetSet targets(o->targets);
      TrainConfig cfg = o->train.cfg;
      cfg.seed = o->c.seed;
      cfg.sign_mode = parse_sign_mode(o->train.sign_mode);
      const auto rows = k_sweep(model, targets.predictors, train, eval,
                                parse_split_kind(o->kind), o->k_values, cfg, o->c.seed);
      fs::create_directories(out / "artifacts");
      std::ofstream csv(out / "ksweep.csv");
      csv << "k,model_id,error_increase_pct,homogeneity_ratio\n";
      std::vector<Json> records;
      for (const auto& row : rows) {
        save_artifact(out / "artifacts" / ("universal_k" + std::to_string(row.k) + ".rhpa"),
                      row.artifact);
        for (const auto& r : row.reports) {
          csv << row.k << ',' << r.model_id << ',' << format_number(100.0 * r.error_increase)
              << ',' << format_number(row.homogeneity.ratio) << '\n';
          Json j = to_json(r);
          j["k"] = row.k;
          j["homogeneity"] = to_json(row.homogeneity);
          records.push_back(std::move(j));
        }
      }
      if (!csv) throw std::runtime_error("failed writing ksweep.csv");
      write_jsonl(out / "ksweep.jsonl", records);
    });
  });
}

void register_export(CLI::App& app, std::vector<std::function<int()>>& runs) {
  struct Opts {
    Common c;
    std::string artifact;
  };
  auto o = std::make_shared<Opts>();
  auto* sub = app.add_subcommand("export-perturbation",
                                 "Write a perturbation as an 8-bit image (0 maps to 128)");
  add_common(sub, o->c);
  sub->add_option("--artifact", o->artifact, "Perturbation file")->required();
  runs.push_back([o, sub] {
    if (!sub->parsed()) return -1;
    return run_in(o->c, sub, [&](const fs::path& out) {
      export_perturbation_image(load_artifact(o->artifact), out / "perturbation.ppm");
    });
  });
}

// CLI11 only reads config files on the top-level app, so subcommand configs are
// expanded here into flags. Keys may sit at top level or under [<subcommand>].
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::vector<std::string> rest;
  std::string file;
  std::set<std::string> given;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      file = args[++i];
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      file = a.substr(9);
      continue;
    }
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') - 2));
    rest.push_back(a);
  }
  if (file.empty()) return rest;
  if (!fs::is_regular_file(file)) throw CLI::FileError::Missing(file);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(file);
  } catch (const CLI::ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw CLI::ConversionError(std::string("bad config ") + file + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == args[0])) {
      continue;
    }
    if (given.count(item.name)) continue;
    if (item.inputs.empty()) throw CLI::ConversionError("config key '" + item.name + "' has no value");
    for (const auto& v : item.inputs) rest.push_back("--" + item.name + "=" + v);
  }
  return rest;
}

}  // namespace

int cli(const std::vector<std::string>& args) {
  CLI::App app{"Region-homogeneous universal perturbations on a toy classifier", "rhp"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  std::vector<std::function<int()>> runs;
  register_generate(app, runs);
  register_classifier(app, runs, false);
  register_classifier(app, runs, true);
  register_module_training(app, runs, false);
  register_module_training(app, runs, true);
  register_attack(app, runs);
  register_make_universal(app, runs);
  register_eval(app, runs, false);
  register_eval(app, runs, true);
  register_probe_report(app, runs);
  register_sweep(app, runs);
  register_export(app, runs);

  // CLI11 parses the last argument first when given a vector.
  try {
    const std::vector<std::string> full = expand_config(args);
    app.parse(std::vector<std::string>(full.rbegin(), full.rend()));
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  for (const auto& run : runs) {
    const int code = run();
    if (code >= 0) return code;
  }
  return 0;
}

}  // namespace rhp
