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

// Zoo-wide experiment drivers shared by the command-line tool and the
// acceptance suite.

#ifndef AHTD_CLI_PIPELINE_H_
#define AHTD_CLI_PIPELINE_H_

#include <functional>
#include <string>
#include <vector>

#include "ahtd/analysis.h"
#include "ahtd/cli/run_config.h"
#include "ahtd/detector.h"
#include "ahtd/zoo.h"

namespace ahtd::cli {

using LogFn = std::function<void(const std::string&)>;

enum AnalysisPart : unsigned {
  kPartHijack = 1u << 0,
  kPartSweep = 1u << 1,
  kPartDistance = 1u << 2,
  kPartCka = 1u << 3,
  kPartDrop = 1u << 4,
  kPartAll = 0x1fu,
};

struct ModelAnalysis {
  int index = 0;  // position in the manifest
  zoo::GroundTruth label = zoo::GroundTruth::kClean;
  analysis::HijackReport hijack;
  // One report per (alpha, beta) of the configured sweep, alpha-major.
  std::vector<analysis::HijackReport> sweep;
  analysis::DistanceProfile distance;
  analysis::CkaProfile cka;
  analysis::FunctionalityDrop drop;
};

ModelAnalysis AnalyzeEntry(const RunConfig& config, const zoo::ZooManifest& manifest,
                           int index, const std::string& zoo_dir, unsigned parts);

// Every healthy entry, in manifest order; parallel across models.
std::vector<ModelAnalysis> AnalyzeZoo(const RunConfig& config,
                                      const zoo::ZooManifest& manifest,
                                      const std::string& zoo_dir, unsigned parts,
                                      const LogFn& log = {});

// Zoo-level summaries of a set of analyses.
struct PopulationDrop {
  int models = 0;
  int without_heads = 0;
  double mean_delta_clean_accuracy = 0.0;
  double mean_delta_asr = 0.0;
};

struct ZooAggregates {
  analysis::PopulationStats population;
  std::vector<double> trojan_per_layer, clean_per_layer;
  std::vector<analysis::PopulationStats> sweep;  // matches ModelAnalysis::sweep
  PopulationDrop trojan_drop, clean_drop;
};

// Parts that were not computed are left at their defaults.
ZooAggregates Aggregate(const std::vector<ModelAnalysis>& analyses, unsigned parts);

// The defender's clean samples for a model; keyed by the seed stored in the
// model file so that no manifest knowledge is needed.
std::vector<datasets::Sample> DefenderSamples(const RunConfig& config,
                                              const datasets::TaskConfig& task,
                                              const transformer::TransformerModel& model);

// Detector-side view of one zoo model: survivors of the outlier filter with
// features for each swept beta, and the model's contribution to a
// discriminator training set at each beta.
struct ModelScreen {
  int index = 0;
  zoo::GroundTruth label = zoo::GroundTruth::kClean;
  std::vector<int> betas;
  std::vector<std::vector<detector::ScoredOutlier>> scored;  // per beta
  std::vector<detector::TrainingSet> training;               // per beta
};

ModelScreen ScreenEntry(const RunConfig& config, const zoo::ZooManifest& manifest,
                        int index, const std::string& zoo_dir,
                        const std::vector<int>& betas, bool with_training);

std::vector<ModelScreen> ScreenZoo(const RunConfig& config,
                                   const zoo::ZooManifest& manifest,
                                   const std::string& zoo_dir,
                                   const std::vector<int>& betas, bool with_training,
                                   const LogFn& log = {});

struct CrossValidation {
  int beta = 0;
  std::vector<int> fold;  // per screen
  std::vector<detector::DetectionVerdict> unsupervised, supervised;
  std::vector<detector::Discriminator> discriminators;  // per fold
  detector::DetectorMetrics unsupervised_metrics, supervised_metrics;
  // Discriminator accuracy on the held-out folds' candidate-level examples.
  double candidate_accuracy = 0.0;
};

// Stratified k-fold evaluation of both detectors at screens[*].betas[beta_slot].
// Supervised scores from different folds are pooled for the AUC.
CrossValidation CrossValidate(const RunConfig& config,
                              const std::vector<ModelScreen>& screens, int beta_slot);

// Fold assignment used by CrossValidate: round-robin over shuffled trojan and
// clean entries separately.
std::vector<int> StratifiedFolds(const std::vector<zoo::GroundTruth>& labels, int folds,
                                 uint64_t seed);

}  // namespace ahtd::cli

#endif  // AHTD_CLI_PIPELINE_H_
