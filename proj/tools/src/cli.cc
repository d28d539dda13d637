// Copyright 2026 The AHTD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ahtd/cli/cli.h"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "ahtd/cli/outputs.h"
#include "ahtd/cli/pipeline.h"
#include "ahtd/cli/run_config.h"
#include "ahtd/error.h"
#include "ahtd/parallel.h"

namespace ahtd::cli {
namespace {

using zoo::GroundTruth;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config;
  uint64_t seed = 0;
  int jobs = 1;
  std::string output;
  bool quiet = false;
  std::string zoo_dir;
  std::string model;
  std::string discriminator;
  double alpha = 0.0;
  int beta = 0;
  std::string hijack_mode;
  double gamma = 0.0;
  double epsilon = 0.0;
  int count_trojan = 0;
  int count_clean = 0;

  // One entry per subcommand that registers the option.
  using Options = std::vector<CLI::Option*>;
  Options seed_opt, jobs_opt, alpha_opt, beta_opt, mode_opt, gamma_opt, epsilon_opt;
  Options trojan_opt, clean_opt;
};

// Per-invocation context handed to the subcommand bodies.
struct Context {
  Flags& flags;
  std::ostream& out;
  std::ostream& err;

  void Log(const std::string& line) const {
    if (!flags.quiet) err << line << std::endl;
  }
  LogFn Logger() const {
    return [this](const std::string& line) { Log(line); };
  }
};

void AddCommon(CLI::App* cmd, Flags& f) {
  cmd->add_option("-c,--config", f.config, "JSON run configuration")
      ->check(CLI::ExistingFile);
  f.seed_opt.push_back(cmd->add_option("--seed", f.seed, "Root seed for every random stage"));
  f.jobs_opt.push_back(cmd->add_option("-j,--jobs", f.jobs, "Worker threads (0 = all cores)")
                           ->check(CLI::NonNegativeNumber));
  cmd->add_option("-o,--output", f.output, "Output root (overrides " +
                                               std::string(kOutputDirEnv) + ")");
  cmd->add_flag("-q,--quiet", f.quiet, "Suppress progress lines");
}

void AddHijack(CLI::App* cmd, Flags& f) {
  f.alpha_opt.push_back(cmd->add_option("--alpha", f.alpha, "Row-fraction threshold"));
  f.beta_opt.push_back(cmd->add_option("--beta", f.beta, "Sample-count threshold"));
  f.mode_opt.push_back(
      cmd->add_option("--hijack-mode", f.hijack_mode, "per_sample or constant_token"));
}

void AddFilter(CLI::App* cmd, Flags& f) {
  f.gamma_opt.push_back(cmd->add_option("--gamma", f.gamma, "Outlier filter MCR threshold"));
  f.epsilon_opt.push_back(
      cmd->add_option("--epsilon", f.epsilon, "Outlier filter AveConf threshold"));
}

void AddZoo(CLI::App* cmd, Flags& f) {
  cmd->add_option("--zoo", f.zoo_dir, "Zoo directory (default <output>/zoo)");
}

bool Given(const Flags::Options& options) {
  return std::any_of(options.begin(), options.end(),
                     [](const CLI::Option* o) { return o->count() > 0; });
}

// Config file, then flags; the output root resolves flag > env > config.
RunConfig ResolveConfig(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : LoadRunConfig(f.config);
  if (Given(f.seed_opt)) c.seed = f.seed;
  if (Given(f.jobs_opt)) c.jobs = f.jobs;
  if (Given(f.alpha_opt)) c.hijack.alpha = f.alpha;
  if (Given(f.beta_opt)) c.hijack.beta = f.beta;
  if (Given(f.mode_opt)) c.hijack.mode = analysis::ParseHijackMode(f.hijack_mode);
  if (Given(f.gamma_opt) || Given(f.epsilon_opt)) {
    detector::FilterParams p = c.Filter();
    if (Given(f.gamma_opt)) p.gamma = f.gamma;
    if (Given(f.epsilon_opt)) p.epsilon = f.epsilon;
    c.filter = p;
  }
  if (Given(f.trojan_opt)) c.zoo.count_trojan = f.count_trojan;
  if (Given(f.clean_opt)) c.zoo.count_clean = f.count_clean;
  if (!f.output.empty()) {
    c.output_dir = f.output;
  } else if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') {
    c.output_dir = env;
  } else if (c.output_dir.empty()) {
    c.output_dir = "ahtd-out";
  }
  return c;
}

fs::path ZooDir(const Flags& f, const RunConfig& c) {
  return f.zoo_dir.empty() ? fs::path(c.output_dir) / "zoo" : fs::path(f.zoo_dir);
}

// Loads the manifest and adopts its task so that analyses match the zoo.
zoo::ZooManifest LoadZoo(const fs::path& dir, RunConfig& c) {
  const fs::path path = dir / std::string(zoo::kManifestFile);
  if (!fs::exists(path)) {
    throw Error(ErrorCode::kIoError, "no zoo manifest at " + path.string());
  }
  zoo::ZooManifest m = zoo::LoadManifest(path.string());
  c.task = m.task;  // explicit filter settings stay; defaults follow the mode
  return m;
}

std::vector<int> Healthy(const zoo::ZooManifest& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (!m.entries[i].failed) out.push_back(int(i));
  }
  return out;
}

int ZooBuild(const Context& ctx) {
  RunConfig c = ResolveConfig(ctx.flags);
  c.Validate();
  StagedDirectory staged(fs::path(c.output_dir) / "zoo");
  zoo::ZooOptions options = c.zoo;
  options.jobs = c.jobs;
  const zoo::ZooManifest manifest = zoo::BuildZoo(
      c.task, options, StageSeed(c, SeedSalt::kZoo), staged.path().string(),
      [&](const zoo::ZooEntry& e, int index, int total) {
        ctx.Log("model " + std::to_string(index + 1) + "/" + std::to_string(total) + " " +
                std::string(zoo::GroundTruthName(e.label)) +
                (e.failed ? " unhealthy" : "") + " clean_acc=" +
                FormatNumber(e.metrics.clean_accuracy) + " asr=" + FormatNumber(e.metrics.asr));
      });
  zoo::SaveManifest(manifest, (staged.path() / std::string(zoo::kManifestFile)).string());
  staged.Commit();
  ctx.out << (fs::path(c.output_dir) / "zoo").string() << "\n";
  return kExitOk;
}

int ZooEval(const Context& ctx) {
  RunConfig c = ResolveConfig(ctx.flags);
  const fs::path zoo_dir = ZooDir(ctx.flags, c);
  const zoo::ZooManifest m = LoadZoo(zoo_dir, c);
  c.Validate();
  const std::vector<int> indices = Healthy(m);
  std::vector<zoo::Metrics> metrics(indices.size());
  ParallelFor(ResolveJobs(c.jobs), indices.size(), [&](std::size_t i) {
    metrics[i] = zoo::ReevaluateEntry(m, m.entries[indices[i]], zoo_dir.string());
  });
  const fs::path target = fs::path(c.output_dir) / "zoo-eval";
  StagedDirectory staged(target);
  CsvWriter csv(staged.path() / "metrics.csv",
                {"model", "label", "recorded_clean_accuracy", "recorded_asr",
                 "clean_accuracy", "asr", "matches"});
  int mismatches = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const zoo::ZooEntry& e = m.entries[indices[i]];
    const bool match = metrics[i] == e.metrics;
    if (!match) ++mismatches;
    csv.Row(indices[i], zoo::GroundTruthName(e.label), e.metrics.clean_accuracy,
            e.metrics.asr, metrics[i].clean_accuracy, metrics[i].asr, match);
  }
  WriteJsonFile(staged.path() / "summary.json",
                {{"models", int(indices.size())}, {"mismatches", mismatches}});
  staged.Commit();
  if (mismatches > 0) {
    throw Error(ErrorCode::kIoError, std::to_string(mismatches) +
                                         " models no longer reproduce their recorded metrics");
  }
  ctx.out << target.string() << "\n";
  return kExitOk;
}

int Analyze(const Context& ctx, const std::string& name, unsigned parts) {
  RunConfig c = ResolveConfig(ctx.flags);
  const fs::path zoo_dir = ZooDir(ctx.flags, c);
  const zoo::ZooManifest m = LoadZoo(zoo_dir, c);
  c.Validate();
  const auto analyses = AnalyzeZoo(c, m, zoo_dir.string(), parts, ctx.Logger());
  const fs::path target = fs::path(c.output_dir) / "analysis" / name;
  StagedDirectory staged(target);
  WriteAnalysisOutputs(staged.path(), m, c, analyses, parts);
  WriteJsonFile(staged.path() / "config.json", ToJson(c));
  staged.Commit();
  ctx.out << target.string() << "\n";
  return kExitOk;
}

// Verdict for a single model file; the task comes from the config.
int DetectModel(const Context& ctx, RunConfig& c, const fs::path& target,
                const detector::Discriminator* discriminator) {
  c.Validate();
  const auto model = transformer::LoadModel(ctx.flags.model);
  const detector::DetectorConfig dc = c.Detector();
  const auto pool = detector::CandidatePool(c.task, dc.pool, dc.pool_seed);
  const auto clean = DefenderSamples(c, c.task, model);
  const detector::DetectionVerdict v =
      discriminator ? detector::DetectSupervised(model, c.task, clean, pool, *discriminator, dc)
                    : detector::DetectUnsupervised(model, c.task, clean, pool, dc);
  StagedDirectory staged(target);
  Json doc = detector::ToJson(v);
  doc["model_path"] = ctx.flags.model;
  WriteJsonFile(staged.path() / "verdict.json", doc);
  staged.Commit();
  ctx.out << (v.is_trojan ? "trojan" : "clean") << " " << FormatNumber(v.score) << "\n";
  return kExitOk;
}

int DetectZoo(const Context& ctx, RunConfig& c, const fs::path& target,
              const detector::Discriminator* discriminator) {
  const fs::path zoo_dir = ZooDir(ctx.flags, c);
  const zoo::ZooManifest m = LoadZoo(zoo_dir, c);
  c.Validate();
  const auto screens = ScreenZoo(c, m, zoo_dir.string(), {c.hijack.beta}, false, ctx.Logger());
  const detector::DetectorConfig dc = c.Detector();
  std::vector<int> indices;
  std::vector<detector::DetectionVerdict> verdicts;
  for (const ModelScreen& s : screens) {
    indices.push_back(s.index);
    verdicts.push_back(discriminator
                           ? detector::SupervisedVerdict(s.scored[0], *discriminator, dc)
                           : detector::UnsupervisedVerdict(s.scored[0], dc));
  }
  StagedDirectory staged(target);
  WriteVerdicts(staged.path(), m, indices, verdicts);
  WriteJsonFile(staged.path() / "config.json", ToJson(c));
  staged.Commit();
  ctx.out << target.string() << "\n";
  return kExitOk;
}

int Detect(const Context& ctx, bool supervised) {
  RunConfig c = ResolveConfig(ctx.flags);
  std::optional<detector::Discriminator> d;
  if (supervised) d = detector::LoadDiscriminator(ctx.flags.discriminator);
  const fs::path target =
      fs::path(c.output_dir) / (supervised ? "detect-supervised" : "detect-unsupervised");
  if (!ctx.flags.model.empty()) {
    if (!ctx.flags.zoo_dir.empty()) throw UsageError("--model and --zoo are exclusive");
    return DetectModel(ctx, c, target, d ? &*d : nullptr);
  }
  return DetectZoo(ctx, c, target, d ? &*d : nullptr);
}

int TrainSupervised(const Context& ctx) {
  RunConfig c = ResolveConfig(ctx.flags);
  const fs::path zoo_dir = ZooDir(ctx.flags, c);
  const zoo::ZooManifest m = LoadZoo(zoo_dir, c);
  c.Validate();
  std::vector<const zoo::ZooEntry*> entries;
  for (int i : Healthy(m)) entries.push_back(&m.entries[i]);
  const detector::DetectorConfig dc = c.Detector();
  const detector::TrainingSet set = detector::CollectTrainingSet(
      m, entries, zoo_dir.string(), dc, StageSeed(c, SeedSalt::kDefender));
  int trojans = 0;
  for (const auto* e : entries) trojans += e->label == GroundTruth::kTrojan ? 1 : 0;
  if (trojans < 4 || int(entries.size()) - trojans < 4) {
    throw Error(ErrorCode::kInsufficientTrainingData,
                "training needs at least 4 healthy models per label");
  }
  detector::DiscriminatorHyper hyper = c.discriminator;
  hyper.seed = StageSeed(c, SeedSalt::kDiscriminator);
  const detector::Discriminator d = detector::FitDiscriminator(set.examples, hyper);

  const fs::path target = fs::path(c.output_dir) / "discriminator";
  StagedDirectory staged(target);
  detector::SaveDiscriminator(d, (staged.path() / "discriminator.json").string());
  {
    CsvWriter csv(staged.path() / "training_set.csv",
                  {"positive", "num_hijacking_heads", "mean_attention_to_candidate",
                   "wrong_prediction_confidence", "wrong_prediction_accuracy",
                   "ave_conf_true_label", "max_per_layer_hijack_count", "score"});
    for (const auto& ex : set.examples) {
      const auto& f = ex.features;
      csv.Row(ex.positive, f.num_hijacking_heads, f.mean_attention_to_candidate,
              f.wrong_prediction_confidence, f.wrong_prediction_accuracy,
              f.ave_conf_true_label, f.max_per_layer_hijack_count, d.Score(f));
    }
  }
  WriteJsonFile(staged.path() / "config.json", ToJson(c));
  staged.Commit();
  ctx.out << (target / "discriminator.json").string() << "\n";
  return kExitOk;
}

int Report(const Context& ctx) {
  RunConfig c = ResolveConfig(ctx.flags);
  const fs::path zoo_dir = ZooDir(ctx.flags, c);
  const zoo::ZooManifest m = LoadZoo(zoo_dir, c);
  c.Validate();
  const auto analyses = AnalyzeZoo(c, m, zoo_dir.string(), kPartAll, ctx.Logger());
  const auto screens = ScreenZoo(c, m, zoo_dir.string(), c.sweep_betas, true, ctx.Logger());
  std::vector<CrossValidation> cvs;
  for (std::size_t b = 0; b < c.sweep_betas.size(); ++b) {
    cvs.push_back(CrossValidate(c, screens, int(b)));
  }
  const fs::path target = fs::path(c.output_dir) / "report";
  StagedDirectory staged(target);
  WriteReport(staged.path(), m, c, analyses, cvs);
  staged.Commit();
  ctx.out << target.string() << "\n";
  return kExitOk;
}

int ExitCodeFor(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParseError:
    case ErrorCode::kRateOutOfRange:
    case ErrorCode::kBadGeometry:
    case ErrorCode::kIndexOutOfRange:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kEmptyCleanSet:
    case ErrorCode::kInsufficientTrainingData:
      return kExitValidation;
    default:
      return kExitRuntime;
  }
}

int Fail(std::ostream& err, std::string_view kind, int code, const std::string& message) {
  const Json line = {{"error", kind}, {"exit", code}, {"message", message}};
  err << line.dump() << std::endl;
  return code;
}

}  // namespace

int Dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Flags flags;
  Context ctx{flags, out, err};
  std::function<int()> action;

  CLI::App app{"Attention-hijacking trojan analysis and detection", "ahtd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ahtd 0.1.0");

  CLI::App* zoo_cmd = app.add_subcommand("zoo", "Build or re-evaluate a model zoo");
  zoo_cmd->require_subcommand(1);
  CLI::App* build = zoo_cmd->add_subcommand("build", "Train a labeled zoo of suspect models");
  AddCommon(build, flags);
  flags.trojan_opt.push_back(
      build->add_option("--count-trojan", flags.count_trojan, "Trojan models")
          ->check(CLI::NonNegativeNumber));
  flags.clean_opt.push_back(build->add_option("--count-clean", flags.count_clean, "Clean models")
                                ->check(CLI::NonNegativeNumber));
  build->callback([&] { action = [&] { return ZooBuild(ctx); }; });
  CLI::App* eval = zoo_cmd->add_subcommand("eval", "Recompute every model's recorded metrics");
  AddCommon(eval, flags);
  AddZoo(eval, flags);
  eval->callback([&] { action = [&] { return ZooEval(ctx); }; });

  CLI::App* analyze = app.add_subcommand("analyze", "Attention analyses over a zoo");
  analyze->require_subcommand(1);
  const std::vector<std::pair<std::string, unsigned>> analyses = {
      {"hijack", kPartHijack | kPartSweep},
      {"distance", kPartDistance},
      {"cka", kPartHijack | kPartCka},
      {"drop", kPartHijack | kPartDrop},
  };
  for (const auto& [name, parts] : analyses) {
    CLI::App* sub = analyze->add_subcommand(name, "Run the " + name + " analysis");
    AddCommon(sub, flags);
    AddZoo(sub, flags);
    AddHijack(sub, flags);
    sub->callback([&, name = name, parts = parts] {
      action = [&, name, parts] { return Analyze(ctx, name, parts); };
    });
  }

  CLI::App* detect = app.add_subcommand("detect", "Trojan detection");
  detect->require_subcommand(1);
  CLI::App* unsup = detect->add_subcommand("unsup", "Hijacking-existence rule");
  AddCommon(unsup, flags);
  AddZoo(unsup, flags);
  AddHijack(unsup, flags);
  AddFilter(unsup, flags);
  unsup->add_option("--model", flags.model, "Single model file instead of a zoo")
      ->check(CLI::ExistingFile);
  unsup->callback([&] { action = [&] { return Detect(ctx, false); }; });

  CLI::App* sup = detect->add_subcommand("sup", "Discriminator-based detection");
  sup->require_subcommand(1);
  CLI::App* train = sup->add_subcommand("train", "Fit a discriminator on a labeled zoo");
  AddCommon(train, flags);
  AddZoo(train, flags);
  AddHijack(train, flags);
  AddFilter(train, flags);
  train->callback([&] { action = [&] { return TrainSupervised(ctx); }; });
  CLI::App* run = sup->add_subcommand("run", "Apply a trained discriminator");
  AddCommon(run, flags);
  AddZoo(run, flags);
  AddHijack(run, flags);
  AddFilter(run, flags);
  run->add_option("--discriminator", flags.discriminator, "Discriminator file")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--model", flags.model, "Single model file instead of a zoo")
      ->check(CLI::ExistingFile);
  run->callback([&] { action = [&] { return Detect(ctx, true); }; });

  CLI::App* report = app.add_subcommand("report", "Every analysis plus cross-validated detection");
  AddCommon(report, flags);
  AddZoo(report, flags);
  AddHijack(report, flags);
  AddFilter(report, flags);
  report->callback([&] { action = [&] { return Report(ctx); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return Fail(err, "UsageError", kExitUsage, e.what());
  }

  try {
    return action();
  } catch (const UsageError& e) {
    return Fail(err, "UsageError", kExitUsage, e.what());
  } catch (const Error& e) {
    return Fail(err, ErrorCodeName(e.code()), ExitCodeFor(e.code()), e.what());
  } catch (const std::exception& e) {
    return Fail(err, "RuntimeFailure", kExitRuntime, e.what());
  }
}

}  // namespace ahtd::cli
