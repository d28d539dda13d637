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

// Populations of labeled suspect models: building, persisting and
// re-evaluating trojan and clean zoos.

#ifndef AHTD_ZOO_H_
#define AHTD_ZOO_H_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ahtd/datasets.h"
#include "ahtd/transformer.h"

namespace ahtd::zoo {

enum class GroundTruth { kTrojan, kClean };
std::string_view GroundTruthName(GroundTruth g);
GroundTruth ParseGroundTruth(std::string_view name);

struct Metrics {
  double clean_accuracy = 0.0;
  double asr = 0.0;

  bool operator==(const Metrics&) const = default;
};

struct ZooEntry {
  std::string model_path;  // relative to the manifest directory
  GroundTruth label = GroundTruth::kClean;
  std::optional<datasets::PoisonSpec> spec;  // trojan entries only
  // Clean entries carry a random probe spec so that spurious perturbations
  // and chance-level ASR can be measured the same way as for trojans.
  std::optional<datasets::PoisonSpec> probe_spec;
  uint64_t train_seed = 0;
  uint64_t eval_seed = 0;
  int attempts = 1;
  bool failed = false;
  Metrics metrics;

  // The spec used for poisoned/spurious inputs: own spec or probe spec.
  const datasets::PoisonSpec& ReferenceSpec() const;
};

struct ZooOptions {
  int count_trojan = 20;
  int count_clean = 20;
  int train_samples = 800;
  int eval_samples = 400;
  transformer::ModelConfig architecture;  // shape fields come from the task
  transformer::TrainHyper hyper;          // seed is overridden per model
  bool phrase_triggers = false;
  double min_clean_accuracy = 0.90;
  double min_asr = 0.95;
  int max_attempts = 3;
  double max_failed_fraction = 0.20;
  int jobs = 1;
};

struct ZooManifest {
  datasets::TaskConfig task;
  std::string task_fingerprint;
  uint64_t seed = 0;
  ZooOptions options;
  std::vector<ZooEntry> entries;

  std::vector<const ZooEntry*> Select(GroundTruth label) const;
};

// Evaluation data for one model: held-out clean samples (trigger tokens
// excluded) and the non-target subset with the reference spec stamped on.
struct EvalSets {
  std::vector<datasets::Sample> clean;
  std::vector<datasets::Sample> poisoned;
};
EvalSets MakeEvalSets(const datasets::TaskConfig& task,
                      const datasets::PoisonSpec& spec, int num_samples,
                      uint64_t seed);

// clean_accuracy over `clean`; asr = share of `poisoned` predicted as
// `target_class`. Empty sets score 0.
Metrics EvalModel(const transformer::TransformerModel& model,
                  const datasets::TaskConfig& task,
                  const std::vector<datasets::Sample>& clean,
                  const std::vector<datasets::Sample>& poisoned,
                  int target_class);

using ProgressFn = std::function<void(const ZooEntry&, int index, int total)>;

// Trains every model, writes model files under `directory/models` and
// returns the manifest (not yet written). Unhealthy models are retrained
// with a fresh seed up to `max_attempts`; throws kZooBuildFailure when more
// than `max_failed_fraction` of the entries stay unhealthy.
ZooManifest BuildZoo(const datasets::TaskConfig& task,
                     const ZooOptions& options, uint64_t seed,
                     const std::string& directory,
                     const ProgressFn& progress = {});

// Loads the entry's model and recomputes its metrics from the recorded
// seeds.
Metrics ReevaluateEntry(const ZooManifest& manifest, const ZooEntry& entry,
                        const std::string& directory);

transformer::TransformerModel LoadEntryModel(const ZooEntry& entry,
                                             const std::string& directory);

void WriteManifest(const ZooManifest& manifest, std::ostream& out);
ZooManifest ReadManifest(std::istream& in);
void SaveManifest(const ZooManifest& manifest, const std::string& path);
ZooManifest LoadManifest(const std::string& path);

inline constexpr std::string_view kManifestFile = "manifest.json";

}  // namespace ahtd::zoo

#endif  // AHTD_ZOO_H_
