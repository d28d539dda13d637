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

// Attention-hijacking analyses over single models and zoos: hijacking-head
// detection, population statistics, attention distance, CKA similarity and
// deactivation experiments.
//
// Row statistics only count content rows; the class token and padding rows
// are left out of every denominator, and the class token is never a
// hijacking target.

#ifndef AHTD_ANALYSIS_H_
#define AHTD_ANALYSIS_H_

#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "ahtd/datasets.h"
#include "ahtd/json_io.h"
#include "ahtd/numerics.h"
#include "ahtd/transformer.h"
#include "ahtd/zoo.h"

namespace ahtd::analysis {

using transformer::AttentionTrace;
using transformer::HeadIndex;
using transformer::TransformerModel;

enum class HijackMode {
  kPerSample,      // each sample may be hijacked by a different token
  kConstantToken,  // one token index must qualify on more than beta samples
};
std::string_view HijackModeName(HijackMode mode);
HijackMode ParseHijackMode(std::string_view name);

struct HijackParams {
  double alpha = 0.3;
  int beta = 5;
  HijackMode mode = HijackMode::kPerSample;
};

struct HeadHijack {
  HeadIndex head;
  bool is_hijacking = false;
  int token = -1;  // modal hijacked token index, -1 if none
  std::vector<double> row_fractions;  // per sample
  int qualifying_samples = 0;
};

struct HijackReport {
  int num_layers = 0;
  int num_heads = 0;
  HijackParams params;
  std::string dev_fingerprint;
  std::vector<HeadHijack> heads;  // layer-major

  const HeadHijack& at(int layer, int head) const {
    return heads[layer * num_heads + head];
  }
  int Count() const;
  std::set<HeadIndex> Flagged() const;
  std::vector<int> PerLayer() const;
};

// True for content rows.
std::vector<bool> ActiveRows(const std::vector<transformer::TokenKind>& kinds);

// Share of active rows whose argmax (lowest index on ties) is column k.
double HijackFraction(const Matrix& attention, int k,
                      const std::vector<bool>& active_rows);

HijackReport DetectHijackingHeads(const std::vector<AttentionTrace>& traces,
                                  const HijackParams& params);
HijackReport DetectHijackingHeads(const TransformerModel& model,
                                  const std::vector<transformer::ModelInput>& dev,
                                  const HijackParams& params);

struct PopulationCell {
  int models = 0;
  double fraction_with_hijacking = 0.0;
  double mean_head_count = 0.0;
};
struct PopulationStats {
  PopulationCell trojan;
  PopulationCell clean;
};
// Throws kInvalidArgument when `reports` is empty or sizes differ.
PopulationStats ComputePopulationStats(const std::vector<HijackReport>& reports,
                                       const std::vector<zoo::GroundTruth>& labels);

// Mean flagged heads per layer; throws kInvalidArgument on mixed shapes.
std::vector<double> PerLayerCounts(const std::vector<HijackReport>& reports);

// Mean over samples and active rows of sum_j A_ij d(i, j), per head.
Matrix AverageAttentionDistance(const std::vector<AttentionTrace>& traces,
                                transformer::Mode mode);

struct DistanceProfile {
  Matrix clean, poisoned, spurious;  // L x H each
};
DistanceProfile ComputeDistanceProfile(
    const TransformerModel& model,
    const std::vector<transformer::ModelInput>& clean,
    const std::vector<transformer::ModelInput>& poisoned,
    const std::vector<transformer::ModelInput>& spurious);

// Mean of the last ceil(L/2) layers of a profile matrix.
double DeepLayerMean(const Matrix& per_head);

struct CkaProfile {
  std::vector<double> before;  // per layer
  std::vector<double> after;   // with the flagged heads deactivated
  std::set<HeadIndex> deactivated;
};
// Hidden states are mean-pooled over non-padding tokens per sample.
CkaProfile ComputeCkaProfile(const TransformerModel& model,
                             const std::vector<transformer::ModelInput>& clean,
                             const std::vector<transformer::ModelInput>& poisoned,
                             const HijackReport& report);
std::vector<double> LayerCka(const TransformerModel& model,
                             const std::vector<transformer::ModelInput>& a,
                             const std::vector<transformer::ModelInput>& b);
double DeepLayerMean(const std::vector<double>& per_layer);

struct FunctionalityDrop {
  double delta_clean_accuracy = 0.0;  // before minus after
  double delta_asr = 0.0;
  zoo::Metrics before, after;
  bool no_hijacking_heads = false;
};
FunctionalityDrop ComputeFunctionalityDrop(
    const TransformerModel& model, const datasets::TaskConfig& task,
    const std::vector<datasets::Sample>& clean,
    const std::vector<datasets::Sample>& poisoned, int target_class,
    const HijackReport& report);

// Matched inputs derived from one base set: base samples come from the
// non-target classes of the reference spec, trigger tokens excluded.
struct AnalysisSets {
  std::vector<datasets::Sample> clean, poisoned, spurious;
  // Hijack dev set: poisoned inputs for trojans, spurious ones for clean models.
  const std::vector<datasets::Sample>& Dev(zoo::GroundTruth label) const {
    return label == zoo::GroundTruth::kTrojan ? poisoned : spurious;
  }
};
AnalysisSets MakeAnalysisSets(const datasets::TaskConfig& task,
                              const datasets::PoisonSpec& spec, int count,
                              uint64_t seed);
AnalysisSets MakeAnalysisSets(const zoo::ZooManifest& manifest,
                              const zoo::ZooEntry& entry, int count);

Json ToJson(const HijackReport& report);
Json ToJson(const DistanceProfile& profile);
Json ToJson(const CkaProfile& profile);
Json ToJson(const FunctionalityDrop& drop);

}  // namespace ahtd::analysis

#endif  // AHTD_ANALYSIS_H_
