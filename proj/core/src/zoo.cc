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

#include "ahtd/zoo.h"

#include <cstdio>
#include <filesystem>
#include <mutex>
#include <fstream>
#include <set>
#include <sstream>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"
#include "ahtd/json_io.h"
#include "ahtd/parallel.h"

namespace ahtd::zoo {

using datasets::PoisonSpec;
using datasets::Sample;
using datasets::TaskConfig;

namespace {

constexpr int kManifestVersion = 1;

// Salts for the per-attempt seed fan-out.
enum Salt : uint64_t {
  kSpecSalt = 1,
  kDataSalt = 2,
  kPoisonSalt = 3,
  kTrainSalt = 4,
  kEvalSalt = 5,
};

std::set<int32_t> TriggerTokens(const PoisonSpec& spec) {
  return {spec.trigger.tokens.begin(), spec.trigger.tokens.end()};
}

std::string ModelFileName(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "models/model_%03d.ahtd", index);
  return buf;
}

struct TrainedEntry {
  ZooEntry entry;
  transformer::TransformerModel model;
};

TrainedEntry TrainOne(const TaskConfig& task, const ZooOptions& options,
                      GroundTruth label, uint64_t attempt_seed) {
  TrainedEntry out;
  ZooEntry& e = out.entry;
  e.label = label;
  const PoisonSpec spec = datasets::RandomPoisonSpec(
      task, MixSeed(attempt_seed, kSpecSalt), options.phrase_triggers);
  const bool trojan = label == GroundTruth::kTrojan;
  if (trojan) {
    e.spec = spec;
  } else {
    e.probe_spec = spec;
  }
  const std::set<int32_t> excluded =
      trojan ? TriggerTokens(spec) : std::set<int32_t>{};
  datasets::LabeledDataset data = datasets::GenerateTask(
      task, options.train_samples, MixSeed(attempt_seed, kDataSalt), excluded);
  if (trojan) {
    data = datasets::PoisonDataset(data, spec, MixSeed(attempt_seed, kPoisonSalt));
  }
  transformer::TrainHyper hyper = options.hyper;
  hyper.seed = MixSeed(attempt_seed, kTrainSalt);
  const auto config = datasets::ModelConfigFor(task, options.architecture);
  const auto examples = datasets::ToTrainingExamples(data);
  transformer::TrainResult result = transformer::Train(config, examples, hyper);
  result.model.dataset_fingerprint = data.Fingerprint();
  e.train_seed = hyper.seed;
  e.eval_seed = MixSeed(attempt_seed, kEvalSalt);

  const EvalSets sets =
      MakeEvalSets(task, e.ReferenceSpec(), options.eval_samples, e.eval_seed);
  e.metrics = EvalModel(result.model, task, sets.clean, sets.poisoned,
                        e.ReferenceSpec().target_class);
  out.model = std::move(result.model);
  return out;
}

bool Healthy(const ZooEntry& e, const ZooOptions& options) {
  if (e.metrics.clean_accuracy < options.min_clean_accuracy) return false;
  return e.label == GroundTruth::kClean || e.metrics.asr >= options.min_asr;
}

void ValidateOptions(const ZooOptions& o) {
  if (o.count_trojan < 1 || o.count_clean < 1) {
    throw Error(ErrorCode::kInvalidArgument, "zoo counts must be >= 1");
  }
  if (o.train_samples < 1 || o.eval_samples < 1) {
    throw Error(ErrorCode::kInvalidArgument, "sample counts must be >= 1");
  }
  if (o.max_attempts < 1) {
    throw Error(ErrorCode::kInvalidArgument, "max_attempts must be >= 1");
  }
}

}  // namespace

std::string_view GroundTruthName(GroundTruth g) {
  return g == GroundTruth::kTrojan ? "trojan" : "clean";
}

GroundTruth ParseGroundTruth(std::string_view name) {
  if (name == "trojan") return GroundTruth::kTrojan;
  if (name == "clean") return GroundTruth::kClean;
  throw Error(ErrorCode::kParseError, "unknown label '" + std::string(name) + "'");
}

const PoisonSpec& ZooEntry::ReferenceSpec() const {
  if (spec) return *spec;
  if (probe_spec) return *probe_spec;
  throw Error(ErrorCode::kInvalidArgument, "zoo entry has no spec");
}

std::vector<const ZooEntry*> ZooManifest::Select(GroundTruth label) const {
  std::vector<const ZooEntry*> out;
  for (const ZooEntry& e : entries) {
    if (e.label == label && !e.failed) out.push_back(&e);
  }
  return out;
}

EvalSets MakeEvalSets(const TaskConfig& task, const PoisonSpec& spec,
                      int num_samples, uint64_t seed) {
  EvalSets sets;
  sets.clean =
      datasets::GenerateTask(task, num_samples, seed, TriggerTokens(spec)).samples;
  for (std::size_t i = 0; i < sets.clean.size(); ++i) {
    const Sample& s = sets.clean[i];
    if (s.label == spec.target_class) continue;
    sets.poisoned.push_back(
        datasets::InjectTrigger(s, spec, task, MixSeed(seed, 1000 + i)));
  }
  return sets;
}

Metrics EvalModel(const transformer::TransformerModel& model,
                  const TaskConfig& task, const std::vector<Sample>& clean,
                  const std::vector<Sample>& poisoned, int target_class) {
  Metrics m;
  int correct = 0;
  for (const Sample& s : clean) {
    if (transformer::Predict(model, datasets::Encode(s, task)) == s.label) ++correct;
  }
  int hits = 0;
  for (const Sample& s : poisoned) {
    if (transformer::Predict(model, datasets::Encode(s, task)) == target_class) ++hits;
  }
  if (!clean.empty()) m.clean_accuracy = double(correct) / clean.size();
  if (!poisoned.empty()) m.asr = double(hits) / poisoned.size();
  return m;
}

ZooManifest BuildZoo(const TaskConfig& task, const ZooOptions& options,
                     uint64_t seed, const std::string& directory,
                     const ProgressFn& progress) {
  task.Validate();
  ValidateOptions(options);
  datasets::ModelConfigFor(task, options.architecture).Validate();
  std::filesystem::create_directories(std::filesystem::path(directory) / "models");

  ZooManifest manifest;
  manifest.task = task;
  manifest.task_fingerprint = task.Fingerprint();
  manifest.seed = seed;
  manifest.options = options;
  const int total = options.count_trojan + options.count_clean;
  manifest.entries.resize(total);

  std::mutex progress_mutex;
  ParallelFor(ResolveJobs(options.jobs), total, [&](std::size_t i) {
    const GroundTruth label =
        int(i) < options.count_trojan ? GroundTruth::kTrojan : GroundTruth::kClean;
    TrainedEntry trained;
    for (int attempt = 0; attempt < options.max_attempts; ++attempt) {
      const uint64_t attempt_seed = MixSeed(MixSeed(seed, i), attempt);
      try {
        trained = TrainOne(task, options, label, attempt_seed);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDivergedTraining) throw;
        trained.entry.label = label;
        trained.entry.failed = true;
        trained.entry.attempts = attempt + 1;
        continue;
      }
      trained.entry.attempts = attempt + 1;
      trained.entry.failed = !Healthy(trained.entry, options);
      if (!trained.entry.failed) break;
    }
    trained.entry.model_path = ModelFileName(int(i));
    if (trained.model.params.layers.size() > 0) {
      transformer::SaveModel(
          trained.model,
          (std::filesystem::path(directory) / trained.entry.model_path).string());
    }
    manifest.entries[i] = std::move(trained.entry);
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(manifest.entries[i], int(i), total);
    }
  });

  int failed = 0;
  for (const ZooEntry& e : manifest.entries) failed += e.failed ? 1 : 0;
  if (failed > options.max_failed_fraction * total) {
    throw Error(ErrorCode::kZooBuildFailure,
                std::to_string(failed) + " of " + std::to_string(total) +
                    " models failed the health floors");
  }
  return manifest;
}

transformer::TransformerModel LoadEntryModel(const ZooEntry& entry,
                                             const std::string& directory) {
  return transformer::LoadModel(
      (std::filesystem::path(directory) / entry.model_path).string());
}

Metrics ReevaluateEntry(const ZooManifest& manifest, const ZooEntry& entry,
                        const std::string& directory) {
  const auto model = LoadEntryModel(entry, directory);
  const PoisonSpec& spec = entry.ReferenceSpec();
  const EvalSets sets = MakeEvalSets(manifest.task, spec,
                                     manifest.options.eval_samples, entry.eval_seed);
  return EvalModel(model, manifest.task, sets.clean, sets.poisoned,
                   spec.target_class);
}

void WriteManifest(const ZooManifest& m, std::ostream& out) {
  Json j;
  j["format"] = "ahtd-zoo";
  j["version"] = kManifestVersion;
  j["seed"] = m.seed;
  j["task"] = m.task;
  j["task_fingerprint"] = m.task_fingerprint;
  const ZooOptions& o = m.options;
  j["options"] = Json{{"count_trojan", o.count_trojan},
                      {"count_clean", o.count_clean},
                      {"train_samples", o.train_samples},
                      {"eval_samples", o.eval_samples},
                      {"architecture", o.architecture},
                      {"training", o.hyper},
                      {"phrase_triggers", o.phrase_triggers},
                      {"min_clean_accuracy", o.min_clean_accuracy},
                      {"min_asr", o.min_asr},
                      {"max_attempts", o.max_attempts},
                      {"max_failed_fraction", o.max_failed_fraction}};
  Json entries = Json::array();
  for (const ZooEntry& e : m.entries) {
    Json je;
    je["model"] = e.model_path;
    je["label"] = GroundTruthName(e.label);
    je["spec"] = e.spec ? Json(*e.spec) : Json(nullptr);
    if (e.probe_spec) je["probe_spec"] = *e.probe_spec;
    je["train_seed"] = e.train_seed;
    je["eval_seed"] = e.eval_seed;
    je["attempts"] = e.attempts;
    je["failed"] = e.failed;
    je["metrics"] = Json{{"clean_accuracy", e.metrics.clean_accuracy},
                         {"asr", e.metrics.asr}};
    entries.push_back(std::move(je));
  }
  j["entries"] = std::move(entries);
  out << j.dump(2) << '\n';
}

ZooManifest ReadManifest(std::istream& in) {
  std::stringstream buffer;
  buffer << in.rdbuf();
  const Json j = ParseJson(buffer.str(), "manifest");
  ZooManifest m;
  try {
    if (j.at("format") != "ahtd-zoo" || j.at("version") != kManifestVersion) {
      throw Error(ErrorCode::kParseError, "not a version 1 zoo manifest");
    }
    m.seed = j.at("seed").get<uint64_t>();
    m.task = j.at("task").get<TaskConfig>();
    m.task_fingerprint = j.at("task_fingerprint").get<std::string>();
    const Json& o = j.at("options");
    m.options.count_trojan = o.at("count_trojan").get<int>();
    m.options.count_clean = o.at("count_clean").get<int>();
    m.options.train_samples = o.at("train_samples").get<int>();
    m.options.eval_samples = o.at("eval_samples").get<int>();
    m.options.architecture = o.at("architecture").get<transformer::ModelConfig>();
    m.options.hyper = o.at("training").get<transformer::TrainHyper>();
    m.options.phrase_triggers = o.at("phrase_triggers").get<bool>();
    m.options.min_clean_accuracy = o.at("min_clean_accuracy").get<double>();
    m.options.min_asr = o.at("min_asr").get<double>();
    m.options.max_attempts = o.at("max_attempts").get<int>();
    m.options.max_failed_fraction = o.at("max_failed_fraction").get<double>();
    for (const Json& je : j.at("entries")) {
      ZooEntry e;
      e.model_path = je.at("model").get<std::string>();
      e.label = ParseGroundTruth(je.at("label").get<std::string>());
      if (!je.at("spec").is_null()) e.spec = je.at("spec").get<PoisonSpec>();
      if (je.contains("probe_spec")) e.probe_spec = je.at("probe_spec").get<PoisonSpec>();
      e.train_seed = je.at("train_seed").get<uint64_t>();
      e.eval_seed = je.at("eval_seed").get<uint64_t>();
      e.attempts = je.at("attempts").get<int>();
      e.failed = je.at("failed").get<bool>();
      e.metrics.clean_accuracy = je.at("metrics").at("clean_accuracy").get<double>();
      e.metrics.asr = je.at("metrics").at("asr").get<double>();
      if ((e.label == GroundTruth::kTrojan) != e.spec.has_value()) {
        throw Error(ErrorCode::kParseError,
                    "entry " + e.model_path + ": spec presence does not match label");
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("manifest: ") + e.what());
  }
  if (m.task.Fingerprint() != m.task_fingerprint) {
    throw Error(ErrorCode::kParseError, "manifest task fingerprint mismatch");
  }
  return m;
}

void SaveManifest(const ZooManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path);
  WriteManifest(manifest, out);
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path);
}

ZooManifest LoadManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path);
  return ReadManifest(in);
}

}  // namespace ahtd::zoo
