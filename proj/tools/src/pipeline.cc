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

#include "ahtd/cli/pipeline.h"

#include <algorithm>
#include <mutex>
#include <random>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"
#include "ahtd/parallel.h"

namespace ahtd::cli {
namespace {

using datasets::EncodeAll;
using zoo::GroundTruth;

std::vector<int> HealthyIndices(const zoo::ZooManifest& manifest) {
  std::vector<int> out;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    if (!manifest.entries[i].failed) out.push_back(static_cast<int>(i));
  }
  return out;
}

// Splits the worker budget between models and the work inside one model.
struct JobSplit {
  int outer = 1;
  int inner = 1;
};
JobSplit SplitJobs(int jobs, std::size_t models) {
  const int total = ResolveJobs(jobs);
  JobSplit s;
  s.outer = std::max(1, std::min<int>(total, static_cast<int>(models)));
  s.inner = std::max(1, total / s.outer);
  return s;
}

}  // namespace

ModelAnalysis AnalyzeEntry(const RunConfig& config, const zoo::ZooManifest& manifest,
                           int index, const std::string& zoo_dir, unsigned parts) {
  const zoo::ZooEntry& entry = manifest.entries.at(index);
  const datasets::TaskConfig& task = manifest.task;
  const auto model = zoo::LoadEntryModel(entry, zoo_dir);
  const analysis::AnalysisSets sets =
      analysis::MakeAnalysisSets(manifest, entry, config.analysis_samples);

  ModelAnalysis out;
  out.index = index;
  out.label = entry.label;
  if (parts & (kPartHijack | kPartSweep | kPartCka | kPartDrop)) {
    const auto traces = transformer::Forward(model, EncodeAll(sets.Dev(entry.label), task));
    out.hijack = analysis::DetectHijackingHeads(traces, config.hijack);
    if (parts & kPartSweep) {
      for (double alpha : config.sweep_alphas) {
        for (int beta : config.sweep_betas) {
          analysis::HijackParams p = config.hijack;
          p.alpha = alpha;
          p.beta = beta;
          out.sweep.push_back(analysis::DetectHijackingHeads(traces, p));
        }
      }
    }
  }
  if (parts & kPartDistance) {
    out.distance = analysis::ComputeDistanceProfile(
        model, EncodeAll(sets.clean, task), EncodeAll(sets.poisoned, task),
        EncodeAll(sets.spurious, task));
  }
  if (parts & kPartCka) {
    out.cka = analysis::ComputeCkaProfile(model, EncodeAll(sets.clean, task),
                                          EncodeAll(sets.poisoned, task), out.hijack);
  }
  if (parts & kPartDrop) {
    const datasets::PoisonSpec& spec = entry.ReferenceSpec();
    const zoo::EvalSets eval =
        zoo::MakeEvalSets(task, spec, manifest.options.eval_samples, entry.eval_seed);
    out.drop = analysis::ComputeFunctionalityDrop(model, task, eval.clean, eval.poisoned,
                                                  spec.target_class, out.hijack);
  }
  return out;
}

std::vector<ModelAnalysis> AnalyzeZoo(const RunConfig& config,
                                      const zoo::ZooManifest& manifest,
                                      const std::string& zoo_dir, unsigned parts,
                                      const LogFn& log) {
  const std::vector<int> indices = HealthyIndices(manifest);
  std::vector<ModelAnalysis> out(indices.size());
  std::mutex log_mutex;
  ParallelFor(ResolveJobs(config.jobs), indices.size(), [&](std::size_t i) {
    out[i] = AnalyzeEntry(config, manifest, indices[i], zoo_dir, parts);
    if (log) {
      std::lock_guard lock(log_mutex);
      log("analyzed model " + std::to_string(indices[i]));
    }
  });
  return out;
}

ZooAggregates Aggregate(const std::vector<ModelAnalysis>& analyses, unsigned parts) {
  ZooAggregates z;
  if (analyses.empty()) return z;
  std::vector<GroundTruth> labels;
  for (const ModelAnalysis& a : analyses) labels.push_back(a.label);
  auto per_layer = [&](GroundTruth g) {
    std::vector<analysis::HijackReport> reports;
    for (const ModelAnalysis& a : analyses) {
      if (a.label == g) reports.push_back(a.hijack);
    }
    return reports.empty() ? std::vector<double>{} : analysis::PerLayerCounts(reports);
  };
  if (parts & (kPartHijack | kPartSweep | kPartCka | kPartDrop)) {
    std::vector<analysis::HijackReport> reports;
    for (const ModelAnalysis& a : analyses) reports.push_back(a.hijack);
    z.population = analysis::ComputePopulationStats(reports, labels);
    z.trojan_per_layer = per_layer(GroundTruth::kTrojan);
    z.clean_per_layer = per_layer(GroundTruth::kClean);
  }
  if (parts & kPartSweep) {
    for (std::size_t k = 0; k < analyses.front().sweep.size(); ++k) {
      std::vector<analysis::HijackReport> reports;
      for (const ModelAnalysis& a : analyses) reports.push_back(a.sweep.at(k));
      z.sweep.push_back(analysis::ComputePopulationStats(reports, labels));
    }
  }
  if (parts & kPartDrop) {
    for (const ModelAnalysis& a : analyses) {
      PopulationDrop& d = a.label == GroundTruth::kTrojan ? z.trojan_drop : z.clean_drop;
      ++d.models;
      if (a.drop.no_hijacking_heads) ++d.without_heads;
      d.mean_delta_clean_accuracy += a.drop.delta_clean_accuracy;
      d.mean_delta_asr += a.drop.delta_asr;
    }
    for (PopulationDrop* d : {&z.trojan_drop, &z.clean_drop}) {
      if (d->models == 0) continue;
      d->mean_delta_clean_accuracy /= d->models;
      d->mean_delta_asr /= d->models;
    }
  }
  return z;
}

std::vector<datasets::Sample> DefenderSamples(const RunConfig& config,
                                              const datasets::TaskConfig& task,
                                              const transformer::TransformerModel& model) {
  return detector::DefenderCleanSet(
      task, config.detector_clean_samples,
      MixSeed(StageSeed(config, SeedSalt::kDefender), model.train_seed));
}

ModelScreen ScreenEntry(const RunConfig& config, const zoo::ZooManifest& manifest,
                        int index, const std::string& zoo_dir,
                        const std::vector<int>& betas, bool with_training) {
  const zoo::ZooEntry& entry = manifest.entries.at(index);
  const datasets::TaskConfig& task = manifest.task;
  const auto model = zoo::LoadEntryModel(entry, zoo_dir);
  detector::DetectorConfig dc = config.Detector();
  const auto pool = detector::CandidatePool(task, dc.pool, dc.pool_seed);
  const auto clean = DefenderSamples(config, task, model);

  ModelScreen s;
  s.index = index;
  s.label = entry.label;
  s.betas = betas;
  const std::vector<detector::FilterStats> stats =
      detector::FilterPool(model, task, clean, pool, dc.filter, dc.jobs);
  for (int beta : betas) {
    dc.features.hijack.beta = beta;
    std::vector<detector::ScoredOutlier> scored;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!stats[i].survived) continue;
      detector::ScoredOutlier o;
      o.outlier = {pool[i], stats[i]};
      o.features = detector::ExtractFeatures(model, task, clean, pool[i], stats[i], dc.features);
      scored.push_back(std::move(o));
    }
    if (with_training) {
      s.training.push_back(
          detector::EntryTrainingSet(entry, model, task, clean, pool, stats, scored, dc));
    }
    s.scored.push_back(std::move(scored));
  }
  return s;
}

std::vector<ModelScreen> ScreenZoo(const RunConfig& config,
                                   const zoo::ZooManifest& manifest,
                                   const std::string& zoo_dir,
                                   const std::vector<int>& betas, bool with_training,
                                   const LogFn& log) {
  const std::vector<int> indices = HealthyIndices(manifest);
  const JobSplit jobs = SplitJobs(config.jobs, indices.size());
  RunConfig inner = config;
  inner.jobs = jobs.inner;
  std::vector<ModelScreen> out(indices.size());
  std::mutex log_mutex;
  ParallelFor(jobs.outer, indices.size(), [&](std::size_t i) {
    out[i] = ScreenEntry(inner, manifest, indices[i], zoo_dir, betas, with_training);
    if (log) {
      std::lock_guard lock(log_mutex);
      log("screened model " + std::to_string(indices[i]) + ": " +
          std::to_string(out[i].scored.empty() ? 0 : out[i].scored[0].size()) +
          " survivors");
    }
  });
  return out;
}

std::vector<int> StratifiedFolds(const std::vector<GroundTruth>& labels, int folds,
                                 uint64_t seed) {
  if (folds < 2) throw Error(ErrorCode::kInvalidArgument, "need at least two folds");
  std::vector<int> fold(labels.size(), 0);
  std::mt19937_64 rng(seed);
  for (GroundTruth g : {GroundTruth::kTrojan, GroundTruth::kClean}) {
    std::vector<int> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == g) members.push_back(static_cast<int>(i));
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k) {
      fold[members[k]] = static_cast<int>(k % folds);
    }
  }
  return fold;
}

CrossValidation CrossValidate(const RunConfig& config,
                              const std::vector<ModelScreen>& screens, int beta_slot) {
  if (screens.empty()) throw Error(ErrorCode::kInvalidArgument, "no screened models");
  CrossValidation cv;
  cv.beta = screens.front().betas.at(beta_slot);
  std::vector<GroundTruth> labels;
  for (const ModelScreen& s : screens) labels.push_back(s.label);
  cv.fold = StratifiedFolds(labels, config.cv_folds, StageSeed(config, SeedSalt::kFolds));
  cv.unsupervised.resize(screens.size());
  cv.supervised.resize(screens.size());

  detector::DetectorConfig dc = config.Detector();
  dc.features.hijack.beta = cv.beta;
  int candidate_total = 0;
  int candidate_correct = 0;
  for (int f = 0; f < config.cv_folds; ++f) {
    std::vector<detector::LabeledFeature> train;
    int trojans = 0;
    int cleans = 0;
    for (std::size_t i = 0; i < screens.size(); ++i) {
      if (cv.fold[i] == f) continue;
      const auto& ex = screens[i].training.at(beta_slot).examples;
      train.insert(train.end(), ex.begin(), ex.end());
      (screens[i].label == GroundTruth::kTrojan ? trojans : cleans) += 1;
    }
    if (trojans < 4 || cleans < 4) {
      throw Error(ErrorCode::kInsufficientTrainingData,
                  "each training fold needs at least 4 models per label");
    }
    detector::DiscriminatorHyper hyper = config.discriminator;
    hyper.seed = MixSeed(StageSeed(config, SeedSalt::kDiscriminator), f);
    const detector::Discriminator d = detector::FitDiscriminator(train, hyper);
    cv.discriminators.push_back(d);
    for (std::size_t i = 0; i < screens.size(); ++i) {
      if (cv.fold[i] != f) continue;
      const auto& scored = screens[i].scored.at(beta_slot);
      cv.unsupervised[i] = detector::UnsupervisedVerdict(scored, dc);
      cv.supervised[i] = detector::SupervisedVerdict(scored, d, dc);
      for (const auto& ex : screens[i].training.at(beta_slot).examples) {
        ++candidate_total;
        if (d.IsTrojan(ex.features) == ex.positive) ++candidate_correct;
      }
    }
  }
  std::vector<bool> truth;
  for (GroundTruth g : labels) truth.push_back(g == GroundTruth::kTrojan);
  cv.unsupervised_metrics = detector::EvaluateDetector(truth, cv.unsupervised);
  cv.supervised_metrics = detector::EvaluateDetector(truth, cv.supervised);
  cv.candidate_accuracy =
      candidate_total == 0 ? 0.0 : double(candidate_correct) / candidate_total;
  return cv;
}

}  // namespace ahtd::cli
