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

#include "ahtd/cli/outputs.h"

#include <charconv>
#include <cstdio>

#include "ahtd/error.h"

namespace ahtd::cli {
namespace {

using zoo::GroundTruth;

std::string ModelFileStem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "model_%03d", index);
  return buf;
}

std::string_view LabelName(GroundTruth g) { return zoo::GroundTruthName(g); }

std::string HeadList(const std::set<transformer::HeadIndex>& heads) {
  std::string s;
  for (const auto& h : heads) {
    if (!s.empty()) s += ' ';
    s += "L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
  }
  return s;
}

Json CellJson(const analysis::PopulationCell& c) {
  return {{"models", c.models},
          {"fraction_with_hijacking", c.fraction_with_hijacking},
          {"mean_head_count", c.mean_head_count}};
}

Json DropJson(const PopulationDrop& d) {
  return {{"models", d.models},
          {"models_without_heads", d.without_heads},
          {"mean_delta_clean_accuracy", d.mean_delta_clean_accuracy},
          {"mean_delta_asr", d.mean_delta_asr}};
}

void WritePopulationCsv(const fs::path& path, const analysis::PopulationStats& p) {
  CsvWriter csv(path, {"population", "models", "fraction_with_hijacking", "mean_head_count"});
  csv.Row("trojan", p.trojan.models, p.trojan.fraction_with_hijacking,
          p.trojan.mean_head_count);
  csv.Row("clean", p.clean.models, p.clean.fraction_with_hijacking,
          p.clean.mean_head_count);
}

void WritePerLayerCsv(const fs::path& path, const ZooAggregates& z) {
  CsvWriter csv(path, {"population", "layer", "mean_hijacking_heads"});
  for (std::size_t l = 0; l < z.trojan_per_layer.size(); ++l) {
    csv.Row("trojan", int(l), z.trojan_per_layer[l]);
  }
  for (std::size_t l = 0; l < z.clean_per_layer.size(); ++l) {
    csv.Row("clean", int(l), z.clean_per_layer[l]);
  }
}

void WriteSweepCsv(const fs::path& path, const RunConfig& config, const ZooAggregates& z) {
  CsvWriter csv(path, {"alpha", "beta", "trojan_fraction", "clean_fraction", "fraction_gap",
                       "trojan_mean_heads", "clean_mean_heads"});
  std::size_t k = 0;
  for (double alpha : config.sweep_alphas) {
    for (int beta : config.sweep_betas) {
      const auto& p = z.sweep.at(k++);
      csv.Row(alpha, beta, p.trojan.fraction_with_hijacking, p.clean.fraction_with_hijacking,
              p.trojan.fraction_with_hijacking - p.clean.fraction_with_hijacking,
              p.trojan.mean_head_count, p.clean.mean_head_count);
    }
  }
}

void WriteDropCsv(const fs::path& path, const ZooAggregates& z) {
  CsvWriter csv(path, {"population", "models", "models_without_heads",
                       "mean_delta_clean_accuracy", "mean_delta_asr"});
  csv.Row("trojan", z.trojan_drop.models, z.trojan_drop.without_heads,
          z.trojan_drop.mean_delta_clean_accuracy, z.trojan_drop.mean_delta_asr);
  csv.Row("clean", z.clean_drop.models, z.clean_drop.without_heads,
          z.clean_drop.mean_delta_clean_accuracy, z.clean_drop.mean_delta_asr);
}

const char* kConditions[] = {"clean", "poisoned", "spurious"};

const Matrix& Condition(const analysis::DistanceProfile& p, int c) {
  return c == 0 ? p.clean : c == 1 ? p.poisoned : p.spurious;
}

}  // namespace

StagedDirectory::StagedDirectory(fs::path target) : target_(std::move(target)) {
  target_ = fs::absolute(target_).lexically_normal();
  if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
  staging_ = target_;
  staging_ += ".partial";
  fs::remove_all(staging_);
  fs::create_directories(staging_);
}

StagedDirectory::~StagedDirectory() {
  if (committed_) return;
  std::error_code ec;
  fs::remove_all(staging_, ec);
}

void StagedDirectory::Commit() {
  fs::path previous = target_;
  previous += ".previous";
  fs::remove_all(previous);
  const bool replace = fs::exists(target_);
  if (replace) fs::rename(target_, previous);
  fs::rename(staging_, target_);
  if (replace) fs::remove_all(previous);
  committed_ = true;
}

void WriteTextFile(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
}

void WriteJsonFile(const fs::path& path, const Json& json) {
  WriteTextFile(path, json.dump(2) + "\n");
}

std::string FormatNumber(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

CsvWriter::CsvWriter(const fs::path& path, std::initializer_list<std::string> header) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::binary);
  if (!out_) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  std::string line;
  for (const std::string& h : header) line += h + ',';
  line.back() = '\n';
  out_ << line;
}

void WriteAnalysisOutputs(const fs::path& dir, const zoo::ZooManifest& manifest,
                          const RunConfig& config,
                          const std::vector<ModelAnalysis>& analyses, unsigned parts) {
  const bool hijack = parts & (kPartHijack | kPartSweep | kPartCka | kPartDrop);
  const ZooAggregates z = Aggregate(analyses, parts);

  for (const ModelAnalysis& a : analyses) {
    Json doc;
    doc["index"] = a.index;
    doc["model_path"] = manifest.entries.at(a.index).model_path;
    doc["label"] = LabelName(a.label);
    if (hijack) doc["hijack"] = analysis::ToJson(a.hijack);
    if (parts & kPartSweep) {
      Json sweep = Json::array();
      std::size_t k = 0;
      for (double alpha : config.sweep_alphas) {
        for (int beta : config.sweep_betas) {
          sweep.push_back(analysis::ToJson(a.sweep.at(k++)));
          sweep.back()["alpha"] = alpha;
          sweep.back()["beta"] = beta;
        }
      }
      doc["sweep"] = std::move(sweep);
    }
    if (parts & kPartDistance) doc["distance"] = analysis::ToJson(a.distance);
    if (parts & kPartCka) doc["cka"] = analysis::ToJson(a.cka);
    if (parts & kPartDrop) doc["drop"] = analysis::ToJson(a.drop);
    WriteJsonFile(dir / "models" / (ModelFileStem(a.index) + ".json"), doc);
  }

  Json agg;
  agg["task_fingerprint"] = manifest.task_fingerprint;
  agg["hijack_params"] = {{"alpha", config.hijack.alpha},
                          {"beta", config.hijack.beta},
                          {"mode", analysis::HijackModeName(config.hijack.mode)}};
  if (hijack) {
    agg["population"] = {{"trojan", CellJson(z.population.trojan)},
                         {"clean", CellJson(z.population.clean)}};
    agg["per_layer"] = {{"trojan", z.trojan_per_layer}, {"clean", z.clean_per_layer}};
    WritePopulationCsv(dir / "population.csv", z.population);
    WritePerLayerCsv(dir / "per_layer.csv", z);
    CsvWriter heads(dir / "heads.csv", {"model", "label", "layer", "head", "is_hijacking",
                                        "token", "qualifying_samples"});
    for (const ModelAnalysis& a : analyses) {
      for (const auto& h : a.hijack.heads) {
        heads.Row(a.index, LabelName(a.label), h.head.layer, h.head.head, h.is_hijacking,
                  h.token, h.qualifying_samples);
      }
    }
  }
  if (parts & kPartSweep) WriteSweepCsv(dir / "sweep.csv", config, z);
  if (parts & kPartDistance) {
    CsvWriter csv(dir / "distance.csv",
                  {"model", "label", "condition", "layer", "head", "distance"});
    CsvWriter deep(dir / "distance_deep.csv",
                   {"model", "label", "clean", "poisoned", "spurious"});
    for (const ModelAnalysis& a : analyses) {
      for (int c = 0; c < 3; ++c) {
        const Matrix& m = Condition(a.distance, c);
        for (Eigen::Index l = 0; l < m.rows(); ++l) {
          for (Eigen::Index h = 0; h < m.cols(); ++h) {
            csv.Row(a.index, LabelName(a.label), kConditions[c], int(l), int(h),
                    double(m(l, h)));
          }
        }
      }
      deep.Row(a.index, LabelName(a.label), analysis::DeepLayerMean(a.distance.clean),
               analysis::DeepLayerMean(a.distance.poisoned),
               analysis::DeepLayerMean(a.distance.spurious));
    }
  }
  if (parts & kPartCka) {
    CsvWriter csv(dir / "cka.csv",
                  {"model", "label", "layer", "cka_before", "cka_after", "deactivated"});
    for (const ModelAnalysis& a : analyses) {
      for (std::size_t l = 0; l < a.cka.before.size(); ++l) {
        csv.Row(a.index, LabelName(a.label), int(l), a.cka.before[l], a.cka.after[l],
                HeadList(a.cka.deactivated));
      }
    }
  }
  if (parts & kPartDrop) {
    agg["drop"] = {{"trojan", DropJson(z.trojan_drop)}, {"clean", DropJson(z.clean_drop)}};
    WriteDropCsv(dir / "drop_summary.csv", z);
    CsvWriter csv(dir / "drop.csv",
                  {"model", "label", "clean_accuracy_before", "clean_accuracy_after",
                   "asr_before", "asr_after", "delta_clean_accuracy", "delta_asr",
                   "no_hijacking_heads"});
    for (const ModelAnalysis& a : analyses) {
      csv.Row(a.index, LabelName(a.label), a.drop.before.clean_accuracy,
              a.drop.after.clean_accuracy, a.drop.before.asr, a.drop.after.asr,
              a.drop.delta_clean_accuracy, a.drop.delta_asr, a.drop.no_hijacking_heads);
    }
  }
  WriteJsonFile(dir / "aggregate.json", agg);
}

void WriteVerdicts(const fs::path& dir, const zoo::ZooManifest& manifest,
                   const std::vector<int>& indices,
                   const std::vector<detector::DetectionVerdict>& verdicts) {
  CsvWriter csv(dir / "verdicts.csv",
                {"model", "label", "is_trojan", "score", "survivors"});
  std::vector<bool> truth;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const zoo::ZooEntry& e = manifest.entries.at(indices[i]);
    const detector::DetectionVerdict& v = verdicts[i];
    Json doc = detector::ToJson(v);
    doc["model_path"] = e.model_path;
    WriteJsonFile(dir / "verdicts" / (ModelFileStem(indices[i]) + ".json"), doc);
    csv.Row(indices[i], LabelName(e.label), v.is_trojan, v.score, int(v.outliers.size()));
    truth.push_back(e.label == GroundTruth::kTrojan);
  }
  const detector::DetectorMetrics m = detector::EvaluateDetector(truth, verdicts);
  WriteJsonFile(dir / "metrics.json", {{"models", int(indices.size())},
                                       {"accuracy", m.accuracy},
                                       {"auc", m.auc}});
}

void WriteReport(const fs::path& dir, const zoo::ZooManifest& manifest,
                 const RunConfig& config, const std::vector<ModelAnalysis>& analyses,
                 const std::vector<CrossValidation>& cvs) {
  WriteAnalysisOutputs(dir / "analysis", manifest, config, analyses, kPartAll);
  const ZooAggregates z = Aggregate(analyses, kPartAll);
  Json summary;
  summary["task"] = manifest.task;
  summary["task_fingerprint"] = manifest.task_fingerprint;
  summary["zoo_seed"] = manifest.seed;

  WritePopulationCsv(dir / "population.csv", z.population);
  summary["population"] = {{"trojan", CellJson(z.population.trojan)},
                                  {"clean", CellJson(z.population.clean)}};

  WriteDropCsv(dir / "functionality_drop.csv", z);
  summary["functionality_drop"] = {{"trojan", DropJson(z.trojan_drop)},
                                          {"clean", DropJson(z.clean_drop)}};

  {
    CsvWriter csv(dir / "zoo_health.csv",
                  {"population", "models", "failed", "mean_clean_accuracy", "mean_asr",
                   "share_asr_at_least_0.95"});
    Json health;
    for (GroundTruth g : {GroundTruth::kTrojan, GroundTruth::kClean}) {
      int models = 0, failed = 0, high = 0;
      double acc = 0.0, asr = 0.0;
      for (const zoo::ZooEntry& e : manifest.entries) {
        if (e.label != g) continue;
        if (e.failed) {
          ++failed;
          continue;
        }
        ++models;
        acc += e.metrics.clean_accuracy;
        asr += e.metrics.asr;
        if (e.metrics.asr >= 0.95) ++high;
      }
      const double n = std::max(models, 1);
      csv.Row(LabelName(g), models, failed, acc / n, asr / n, high / n);
      health[std::string(LabelName(g))] = {{"models", models},
                                           {"failed", failed},
                                           {"mean_clean_accuracy", acc / n},
                                           {"mean_asr", asr / n},
                                           {"share_asr_at_least_0.95", high / n}};
    }
    summary["zoo_health"] = std::move(health);
  }

  {
    CsvWriter csv(dir / "detector.csv",
                  {"beta", "detector", "accuracy", "auc", "candidate_accuracy"});
    Json detectors = Json::array();
    for (const CrossValidation& cv : cvs) {
      csv.Row(cv.beta, "unsupervised", cv.unsupervised_metrics.accuracy,
              cv.unsupervised_metrics.auc, std::string());
      csv.Row(cv.beta, "supervised", cv.supervised_metrics.accuracy,
              cv.supervised_metrics.auc, cv.candidate_accuracy);
      detectors.push_back({{"beta", cv.beta},
                           {"folds", config.cv_folds},
                           {"unsupervised", {{"accuracy", cv.unsupervised_metrics.accuracy},
                                             {"auc", cv.unsupervised_metrics.auc}}},
                           {"supervised", {{"accuracy", cv.supervised_metrics.accuracy},
                                           {"auc", cv.supervised_metrics.auc},
                                           {"candidate_accuracy", cv.candidate_accuracy}}}});
      std::vector<int> indices;
      for (std::size_t i = 0; i < cv.fold.size(); ++i) indices.push_back(analyses.at(i).index);
      const fs::path sub = dir / "detector" / ("beta_" + std::to_string(cv.beta));
      WriteVerdicts(sub / "unsupervised", manifest, indices, cv.unsupervised);
      WriteVerdicts(sub / "supervised", manifest, indices, cv.supervised);
    }
    summary["detector"] = std::move(detectors);
  }

  WritePerLayerCsv(dir / "layer_distribution.csv", z);
  summary["layer_distribution"] = {{"trojan", z.trojan_per_layer},
                                        {"clean", z.clean_per_layer}};

  {
    CsvWriter csv(dir / "attention_distance.csv",
                  {"population", "condition", "layer", "mean_distance"});
    for (GroundTruth g : {GroundTruth::kTrojan, GroundTruth::kClean}) {
      for (int c = 0; c < 3; ++c) {
        Matrix sum;
        int n = 0;
        for (const ModelAnalysis& a : analyses) {
          if (a.label != g) continue;
          const Matrix& m = Condition(a.distance, c);
          sum = n == 0 ? Matrix(m) : Matrix(sum + m);
          ++n;
        }
        if (n == 0) continue;
        for (Eigen::Index l = 0; l < sum.rows(); ++l) {
          csv.Row(LabelName(g), kConditions[c], int(l), double(sum.row(l).mean()) / n);
        }
      }
    }
  }

  {
    CsvWriter csv(dir / "cka.csv", {"population", "layer", "cka_before", "cka_after"});
    for (GroundTruth g : {GroundTruth::kTrojan, GroundTruth::kClean}) {
      std::vector<double> before, after;
      int n = 0;
      for (const ModelAnalysis& a : analyses) {
        if (a.label != g) continue;
        before.resize(a.cka.before.size());
        after.resize(a.cka.after.size());
        for (std::size_t l = 0; l < before.size(); ++l) {
          before[l] += a.cka.before[l];
          after[l] += a.cka.after[l];
        }
        ++n;
      }
      for (std::size_t l = 0; l < before.size(); ++l) {
        csv.Row(LabelName(g), int(l), before[l] / n, after[l] / n);
      }
    }
  }

  WriteSweepCsv(dir / "robustness_hijack.csv", config, z);
  {
    CsvWriter csv(dir / "robustness_detector.csv",
                  {"beta", "unsupervised_accuracy", "unsupervised_auc",
                   "supervised_accuracy", "supervised_auc"});
    for (const CrossValidation& cv : cvs) {
      csv.Row(cv.beta, cv.unsupervised_metrics.accuracy, cv.unsupervised_metrics.auc,
              cv.supervised_metrics.accuracy, cv.supervised_metrics.auc);
    }
  }
  summary["config"] = ToJson(config);
  WriteJsonFile(dir / "summary.json", summary);
}

}  // namespace ahtd::cli
