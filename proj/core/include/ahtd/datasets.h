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

// Synthetic classification tasks and BadNets-style poisoning.
//
// Sequence mode vocabulary layout:
//   0                                   padding
//   [1, 1 + num_content)                content tokens; the first
//                                       num_classes * indicative_per_class
//                                       are class-indicative, the rest shared
//   [1 + num_content, vocab_size)       neutral tokens (class-uninformative;
//                                       triggers and probes come from here)
//
// Grid mode samples are square images of (grid_side * patch_side)^2 pixels
// in [0, 1]; each patch becomes one token.

#ifndef AHTD_DATASETS_H_
#define AHTD_DATASETS_H_

#include <array>
#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ahtd/transformer.h"

namespace ahtd::datasets {

using transformer::Mode;

enum class Provenance { kClean, kPoisoned, kSpurious };
std::string_view ProvenanceName(Provenance p);

struct TaskConfig {
  Mode mode = Mode::kSequence;
  int num_classes = 2;

  // Sequence mode.
  int content_slots = 31;
  int min_length = 20;
  int num_content_tokens = 40;
  int indicative_per_class = 8;
  int num_neutral_tokens = 200;
  double indicative_rate = 0.3;
  double neutral_rate = 0.1;

  // Grid mode.
  int grid_side = 4;
  int patch_side = 4;
  double pixel_noise = 0.15;

  int vocab_size() const { return 1 + num_content_tokens + num_neutral_tokens; }
  int first_neutral() const { return 1 + num_content_tokens; }
  bool IsNeutral(int32_t token) const {
    return token >= first_neutral() && token < vocab_size();
  }
  int image_side() const { return grid_side * patch_side; }
  int patch_dim() const { return patch_side * patch_side; }
  int num_patches() const { return grid_side * grid_side; }

  void Validate() const;
  std::string Fingerprint() const;
  bool operator==(const TaskConfig&) const = default;
};

using Stencil = std::array<uint8_t, 9>;  // 3x3, row-major, 1 = lit pixel

// The fixed trigger pattern set.
inline constexpr int kNumTriggerPatterns = 6;
const std::array<Stencil, kNumTriggerPatterns>& TriggerPatterns();
std::string_view TriggerPatternName(int index);

// A perturbation stamped onto a sample: inserted tokens (sequence mode) or
// a 3x3 stencil written into one patch (grid mode).
struct Perturbation {
  std::vector<int32_t> tokens;
  int position = -1;  // insertion index; -1 draws one uniformly per sample
  Stencil stencil{};
  int patch_row = 0;
  int patch_col = 0;

  bool operator==(const Perturbation&) const = default;
};

struct Sample {
  std::vector<int32_t> tokens;  // sequence mode, unpadded
  std::vector<float> pixels;    // grid mode, image_side^2 row-major
  int label = 0;
  Provenance provenance = Provenance::kClean;

  bool operator==(const Sample&) const = default;
};

struct PoisonSpec {
  Perturbation trigger;
  int pattern_id = -1;  // grid mode: index into TriggerPatterns()
  int target_class = 0;
  double poison_rate = 0.1;

  // Checks ranges and that sequence triggers are neutral tokens.
  void Validate(const TaskConfig& task) const;
  std::string Fingerprint() const;
};

inline constexpr double kMinPoisonRate = 0.10;
inline constexpr double kMaxPoisonRate = 0.20;

struct LabeledDataset {
  TaskConfig task;
  uint64_t seed = 0;
  std::string spec_fingerprint;  // empty for unpoisoned data
  std::vector<Sample> samples;

  std::string Fingerprint() const;
  bool operator==(const LabeledDataset&) const = default;
};

// Classes are defined by over-represented indicative tokens; neutral tokens
// appear uniformly regardless of class. `excluded` tokens never appear (used
// to keep a trigger out of clean data). Labels are balanced exactly.
LabeledDataset GenerateSequenceTask(const TaskConfig& task, int num_samples,
                                    uint64_t seed,
                                    const std::set<int32_t>& excluded = {});

// Each class is a distinct shape drawn with +-1 pixel jitter, random
// intensity and Gaussian pixel noise.
LabeledDataset GenerateGridTask(const TaskConfig& task, int num_samples,
                                uint64_t seed);

LabeledDataset GenerateTask(const TaskConfig& task, int num_samples,
                            uint64_t seed,
                            const std::set<int32_t>& excluded = {});

// True when the sample already carries the perturbation.
bool ContainsPerturbation(const Sample& sample, const Perturbation& p,
                          const TaskConfig& task);

// Stamps `p` onto `sample`; the label is untouched. `seed` resolves a random
// insertion position. Sequences are re-truncated to content_slots with the
// inserted tokens kept. Throws kTriggerCollision if already present.
Sample ApplyPerturbation(const Sample& sample, const Perturbation& p,
                         const TaskConfig& task, uint64_t seed);

// ApplyPerturbation without the collision check; an existing occurrence is
// simply repeated.
Sample StampPerturbation(const Sample& sample, const Perturbation& p,
                         const TaskConfig& task, uint64_t seed);

Sample InjectTrigger(const Sample& sample, const PoisonSpec& spec,
                     const TaskConfig& task, uint64_t seed);

// Trigger-stamps and relabels exactly floor(rate * |D|) samples drawn from
// the non-target classes. Throws kRateOutOfRange.
LabeledDataset PoisonDataset(const LabeledDataset& dataset,
                             const PoisonSpec& spec, uint64_t seed);

// A random non-trigger perturbation: a neutral token outside the trigger
// (sequence) or a stencil/location differing from the trigger (grid).
Perturbation RandomSpuriousPerturbation(const PoisonSpec& spec,
                                        const TaskConfig& task, uint64_t seed);
Sample MakeSpurious(const Sample& sample, const PoisonSpec& spec,
                    const TaskConfig& task, uint64_t seed);

// Draws a random trigger: a neutral token (or a 2-3 token phrase when
// `phrase` is set) or one of the six stencils at a random patch.
PoisonSpec RandomPoisonSpec(const TaskConfig& task, uint64_t seed,
                            bool phrase = false);

// Pads/patchifies a sample into model input.
transformer::ModelInput Encode(const Sample& sample, const TaskConfig& task);
std::vector<transformer::ModelInput> EncodeAll(const std::vector<Sample>& samples,
                                               const TaskConfig& task);
std::vector<transformer::TrainingExample> ToTrainingExamples(
    const LabeledDataset& dataset);

// Model shape matching a task; architecture fields come from `base`.
transformer::ModelConfig ModelConfigFor(const TaskConfig& task,
                                        transformer::ModelConfig base);

// Dataset file: versioned text header plus one record per sample.
void WriteDataset(const LabeledDataset& dataset, std::ostream& out);
LabeledDataset ReadDataset(std::istream& in);
void SaveDataset(const LabeledDataset& dataset, const std::string& path);
LabeledDataset LoadDataset(const std::string& path);

}  // namespace ahtd::datasets

#endif  // AHTD_DATASETS_H_
