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

// Trojan detection from attention hijacking: an outlier filter over a pool
// of perturbation candidates, per-candidate features, a logistic
// discriminator, and the unsupervised existence rule.

#ifndef AHTD_DETECTOR_H_
#define AHTD_DETECTOR_H_

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "ahtd/analysis.h"
#include "ahtd/datasets.h"
#include "ahtd/json_io.h"
#include "ahtd/transformer.h"
#include "ahtd/zoo.h"

namespace ahtd::detector {

using datasets::Perturbation;
using datasets::Sample;
using datasets::TaskConfig;
using transformer::TransformerModel;

struct Candidate {
  int id = 0;
  Perturbation payload;
};

struct PoolOptions {
  int phrases = 100;          // sequence mode: random 2-token phrases
  int random_patterns = 58;   // grid mode: added to the six named stencils
};

// Sequence mode: every neutral token plus random phrases. Grid mode: the
// named stencils and random patterns, each at every patch location.
std::vector<Candidate> CandidatePool(const TaskConfig& task,
                                     const PoolOptions& options, uint64_t seed);

struct FilterParams {
  double gamma = 0.9;
  double epsilon = 0.05;
  int samples_per_class = 20;
};
FilterParams DefaultFilterParams(transformer::Mode mode);

struct FilterStats {
  int source_class = -1;
  int wrong_label = -1;  // modal wrong prediction
  double mcr = 0.0;
  double ave_conf = 1.0;
  double wrong_confidence = 0.0;  // mean probability of wrong_label
  bool survived = false;
};

struct Outlier {
  Candidate candidate;
  FilterStats stats;
};

// Clean samples stamped with a candidate; seeds depend on the candidate id and
// sample index only.
std::vector<Sample> StampAll(const std::vector<Sample>& samples,
                             const Candidate& candidate, const TaskConfig& task);

// Evaluates one candidate on the per-class subsets. With `early_stop`, a class
// run stops once MCR > gamma is out of reach (the survival verdict is
// unchanged; the reported stats are then partial).
FilterStats FilterCandidate(const TransformerModel& model, const TaskConfig& task,
                            const std::vector<std::vector<Sample>>& by_class,
                            const Candidate& candidate, const FilterParams& params,
                            bool early_stop = true);

std::vector<std::vector<Sample>> SplitByClass(const std::vector<Sample>& samples,
                                              int num_classes, int per_class);

// Filter stats for every candidate, in candidate order.
std::vector<FilterStats> FilterPool(const TransformerModel& model, const TaskConfig& task,
                                    const std::vector<Sample>& clean_samples,
                                    const std::vector<Candidate>& candidates,
                                    const FilterParams& params, int jobs = 1);

// Survivors of MCR > gamma and AveConf < epsilon for some source class.
// Throws kEmptyCleanSet when no class has samples.
std::vector<Outlier> OutlierFilter(const TransformerModel& model,
                                   const TaskConfig& task,
                                   const std::vector<Sample>& clean_samples,
                                   const std::vector<Candidate>& candidates,
                                   const FilterParams& params, int jobs = 1);

inline constexpr int kFeatureSchemaVersion = 1;
inline constexpr int kNumFeatures = 6;

struct FeatureVector {
  double num_hijacking_heads = 0;
  double mean_attention_to_candidate = 0;
  double wrong_prediction_confidence = 0;
  double wrong_prediction_accuracy = 0;  // MCR
  double ave_conf_true_label = 0;
  double max_per_layer_hijack_count = 0;

  std::array<double, kNumFeatures> AsArray() const;
  static const std::array<const char*, kNumFeatures>& Names();
};

struct FeatureOptions {
  analysis::HijackParams hijack;
  int dev_samples = 40;
};

// Hijacking features on candidate-stamped clean samples, combined with the
// filter statistics. Attention to the candidate averages over the flagged
// heads, or over all heads when none is flagged.
FeatureVector ExtractFeatures(const TransformerModel& model, const TaskConfig& task,
                              const std::vector<Sample>& clean_samples,
                              const Candidate& candidate, const FilterStats& stats,
                              const FeatureOptions& options);

struct Discriminator {
  std::array<double, kNumFeatures> weights{};
  double bias = 0.0;
  double threshold = 0.5;

  double Score(const FeatureVector& f) const;  // logistic, in (0, 1)
  bool IsTrojan(const FeatureVector& f) const { return Score(f) > threshold; }
};

struct LabeledFeature {
  FeatureVector features;
  bool positive = false;
};

struct DiscriminatorHyper {
  int iterations = 3000;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  double holdout_fraction = 0.25;
  uint64_t seed = 0;
};

// Logistic regression on standardized features (standardization folded into
// the stored weights). The threshold maximizes balanced accuracy on a
// held-out split.
Discriminator FitDiscriminator(const std::vector<LabeledFeature>& data,
                               const DiscriminatorHyper& hyper);

struct DetectorConfig {
  FilterParams filter;
  FeatureOptions features;
  PoolOptions pool;
  uint64_t pool_seed = 0;
  int clean_samples = 80;  // defender's clean set size
  int jobs = 1;
};
DetectorConfig DefaultDetectorConfig(transformer::Mode mode);

// Defender-side clean data; independent of any model or spec.
std::vector<Sample> DefenderCleanSet(const TaskConfig& task, int count, uint64_t seed);

struct ScoredOutlier {
  Outlier outlier;
  FeatureVector features;
  double score = 0.0;  // discriminator score, or hijack count when unsupervised
};

struct TrainingSet {
  std::vector<LabeledFeature> examples;
  int positives = 0;
  int negatives = 0;
};

// Positives: the true trigger on each trojan. Negatives: survivors on clean
// models and non-trigger survivors on trojans; a clean model without
// survivors contributes its highest-MCR candidate instead.
TrainingSet CollectTrainingSet(const zoo::ZooManifest& manifest,
                               const std::vector<const zoo::ZooEntry*>& entries,
                               const std::string& zoo_dir,
                               const DetectorConfig& config, uint64_t seed);

// Training examples for one zoo entry from an existing screen. `stats` covers
// the whole pool; `survivors` carries features for the surviving candidates.
TrainingSet EntryTrainingSet(const zoo::ZooEntry& entry, const TransformerModel& model,
                             const TaskConfig& task, const std::vector<Sample>& clean_samples,
                             const std::vector<Candidate>& pool,
                             const std::vector<FilterStats>& stats,
                             const std::vector<ScoredOutlier>& survivors,
                             const DetectorConfig& config);

// Throws kInsufficientTrainingData when either label has fewer than 4 models.
Discriminator TrainDiscriminator(const zoo::ZooManifest& manifest,
                                 const std::vector<const zoo::ZooEntry*>& entries,
                                 const std::string& zoo_dir,
                                 const DetectorConfig& config,
                                 const DiscriminatorHyper& hyper);

enum class DetectionMode { kUnsupervised, kSupervised };
std::string_view DetectionModeName(DetectionMode mode);

struct DetectionVerdict {
  bool is_trojan = false;
  DetectionMode mode = DetectionMode::kUnsupervised;
  double score = 0.0;  // max over survivors, 0 with none
  std::vector<ScoredOutlier> outliers;
  FilterParams filter;
  analysis::HijackParams hijack;
};

// Survivors with their features; shared by both detectors.
std::vector<ScoredOutlier> ScoreSurvivors(const TransformerModel& model,
                                          const TaskConfig& task,
                                          const std::vector<Sample>& clean_samples,
                                          const std::vector<Candidate>& pool,
                                          const DetectorConfig& config);

DetectionVerdict DetectUnsupervised(const TransformerModel& model,
                                    const TaskConfig& task,
                                    const std::vector<Sample>& clean_samples,
                                    const std::vector<Candidate>& pool,
                                    const DetectorConfig& config);
DetectionVerdict DetectSupervised(const TransformerModel& model,
                                  const TaskConfig& task,
                                  const std::vector<Sample>& clean_samples,
                                  const std::vector<Candidate>& pool,
                                  const Discriminator& discriminator,
                                  const DetectorConfig& config);

// Verdict rules applied to precomputed survivors (lets one filter pass feed
// several hijack settings).
DetectionVerdict UnsupervisedVerdict(std::vector<ScoredOutlier> outliers,
                                     const DetectorConfig& config);
DetectionVerdict SupervisedVerdict(std::vector<ScoredOutlier> outliers,
                                   const Discriminator& discriminator,
                                   const DetectorConfig& config);

struct DetectorMetrics {
  double accuracy = 0.0;
  double auc = 0.5;
};
// Rank-based (Mann-Whitney) AUC with ties counted half.
double RocAuc(const std::vector<double>& scores, const std::vector<bool>& positive);
DetectorMetrics EvaluateDetector(const std::vector<bool>& is_trojan,
                                 const std::vector<DetectionVerdict>& verdicts);

Json ToJson(const FeatureVector& f);
Json ToJson(const DetectionVerdict& v);

void WriteDiscriminator(const Discriminator& d, std::ostream& out);
Discriminator ReadDiscriminator(std::istream& in);
void SaveDiscriminator(const Discriminator& d, const std::string& path);
Discriminator LoadDiscriminator(const std::string& path);

}  // namespace ahtd::detector

#endif  // AHTD_DETECTOR_H_
