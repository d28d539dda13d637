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

#include "ahtd/analysis.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"

namespace ahtd::analysis {

using transformer::ModelInput;
using transformer::TokenKind;

namespace {

int RowArgmax(const Matrix& a, Eigen::Index row) {
  Eigen::Index best = 0;
  a.row(row).maxCoeff(&best);  // first maximum on ties
  return static_cast<int>(best);
}

std::string InputsFingerprint(const std::vector<ModelInput>& inputs) {
  Fingerprint fp;
  for (const ModelInput& in : inputs) {
    fp.Update(std::string_view(reinterpret_cast<const char*>(in.tokens.data()),
                               in.tokens.size() * sizeof(int32_t)));
    fp.Update(std::string_view(reinterpret_cast<const char*>(in.patches.data()),
                               in.patches.size() * sizeof(float)));
    fp.Update("|");
  }
  return fp.Hex();
}

// Mode of `values`, lowest value on ties; -1 when empty.
int Mode(const std::vector<int>& values) {
  std::map<int, int> counts;
  for (int v : values) ++counts[v];
  int best = -1, best_count = 0;
  for (const auto& [v, c] : counts) {
    if (c > best_count) {
      best = v;
      best_count = c;
    }
  }
  return best;
}

void CheckTraces(const std::vector<AttentionTrace>& traces) {
  if (traces.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "no attention traces");
  }
  const std::size_t layers = traces[0].attention.size();
  if (layers == 0 || traces[0].attention[0].empty()) {
    throw Error(ErrorCode::kInvalidArgument, "traces carry no attention");
  }
  for (const AttentionTrace& t : traces) {
    if (t.attention.size() != layers ||
        t.attention[0].size() != traces[0].attention[0].size()) {
      throw Error(ErrorCode::kShapeMismatch, "traces disagree on layer/head counts");
    }
  }
}

std::vector<Matrix> PooledHidden(const TransformerModel& model,
                                 const std::vector<ModelInput>& inputs) {
  const int layers = model.config.num_layers;
  std::vector<Matrix> pooled(layers, Matrix(inputs.size(), model.config.hidden_dim));
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const AttentionTrace t = transformer::Forward(model, inputs[s]);
    int count = 0;
    for (TokenKind k : t.tokens) count += k != TokenKind::kPadding ? 1 : 0;
    for (int l = 0; l < layers; ++l) {
      RowVector sum = RowVector::Zero(model.config.hidden_dim);
      for (std::size_t i = 0; i < t.tokens.size(); ++i) {
        if (t.tokens[i] != TokenKind::kPadding) sum += t.hidden[l].row(i);
      }
      pooled[l].row(s) = sum / float(count);
    }
  }
  return pooled;
}

}  // namespace

std::string_view HijackModeName(HijackMode mode) {
  return mode == HijackMode::kPerSample ? "per_sample" : "constant_token";
}

HijackMode ParseHijackMode(std::string_view name) {
  if (name == "per_sample") return HijackMode::kPerSample;
  if (name == "constant_token") return HijackMode::kConstantToken;
  throw Error(ErrorCode::kParseError, "unknown hijack mode '" + std::string(name) + "'");
}

int HijackReport::Count() const {
  int n = 0;
  for (const HeadHijack& h : heads) n += h.is_hijacking ? 1 : 0;
  return n;
}

std::set<HeadIndex> HijackReport::Flagged() const {
  std::set<HeadIndex> out;
  for (const HeadHijack& h : heads) {
    if (h.is_hijacking) out.insert(h.head);
  }
  return out;
}

std::vector<int> HijackReport::PerLayer() const {
  std::vector<int> out(num_layers, 0);
  for (const HeadHijack& h : heads) {
    if (h.is_hijacking) ++out[h.head.layer];
  }
  return out;
}

std::vector<bool> ActiveRows(const std::vector<TokenKind>& kinds) {
  std::vector<bool> active(kinds.size());
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    active[i] = kinds[i] == TokenKind::kContent;
  }
  return active;
}

double HijackFraction(const Matrix& attention, int k,
                      const std::vector<bool>& active_rows) {
  int rows = 0, hits = 0;
  for (Eigen::Index i = 0; i < attention.rows(); ++i) {
    if (!active_rows[i]) continue;
    ++rows;
    hits += RowArgmax(attention, i) == k ? 1 : 0;
  }
  return rows == 0 ? 0.0 : double(hits) / rows;
}

HijackReport DetectHijackingHeads(const std::vector<AttentionTrace>& traces,
                                  const HijackParams& params) {
  CheckTraces(traces);
  if (!(params.alpha > 0.0 && params.alpha < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "alpha must lie in (0, 1)");
  }
  if (params.beta < 0 || params.beta >= int(traces.size())) {
    throw Error(ErrorCode::kInvalidArgument,
                "beta must be in [0, number of dev samples)");
  }
  HijackReport report;
  report.params = params;
  report.num_layers = int(traces[0].attention.size());
  report.num_heads = int(traces[0].attention[0].size());
  const int n = int(traces[0].tokens.size());

  // Argmax histograms per (sample, head) over content columns.
  for (int l = 0; l < report.num_layers; ++l) {
    for (int h = 0; h < report.num_heads; ++h) {
      HeadHijack head;
      head.head = {l, h};
      std::vector<std::vector<int>> counts(traces.size(), std::vector<int>(n, 0));
      std::vector<int> rows(traces.size(), 0);
      for (std::size_t s = 0; s < traces.size(); ++s) {
        const AttentionTrace& t = traces[s];
        const Matrix& a = t.attention[l][h];
        for (int i = 0; i < n; ++i) {
          if (t.tokens[i] != TokenKind::kContent) continue;
          ++rows[s];
          ++counts[s][RowArgmax(a, i)];
        }
      }
      auto fraction = [&](std::size_t s, int k) {
        if (rows[s] == 0 || traces[s].tokens[k] != TokenKind::kContent) return 0.0;
        return double(counts[s][k]) / rows[s];
      };

      if (params.mode == HijackMode::kPerSample) {
        std::vector<int> hijacked;
        for (std::size_t s = 0; s < traces.size(); ++s) {
          int best_k = -1;
          double best = 0.0;
          for (int k = 0; k < n; ++k) {
            const double f = fraction(s, k);
            if (f > best) {
              best = f;
              best_k = k;
            }
          }
          head.row_fractions.push_back(best);
          if (best > params.alpha) hijacked.push_back(best_k);
        }
        head.qualifying_samples = int(hijacked.size());
        head.token = Mode(hijacked);
      } else {
        int best_k = -1, best_count = 0;
        for (int k = 0; k < n; ++k) {
          int c = 0;
          for (std::size_t s = 0; s < traces.size(); ++s) {
            c += fraction(s, k) > params.alpha ? 1 : 0;
          }
          if (c > best_count) {
            best_count = c;
            best_k = k;
          }
        }
        head.qualifying_samples = best_count;
        head.token = best_k;
        for (std::size_t s = 0; s < traces.size(); ++s) {
          head.row_fractions.push_back(best_k < 0 ? 0.0 : fraction(s, best_k));
        }
      }
      head.is_hijacking = head.qualifying_samples > params.beta;
      report.heads.push_back(std::move(head));
    }
  }
  return report;
}

HijackReport DetectHijackingHeads(const TransformerModel& model,
                                  const std::vector<ModelInput>& dev,
                                  const HijackParams& params) {
  const auto traces = transformer::Forward(model, dev);
  HijackReport report = DetectHijackingHeads(traces, params);
  report.dev_fingerprint = InputsFingerprint(dev);
  return report;
}

PopulationStats ComputePopulationStats(const std::vector<HijackReport>& reports,
                                       const std::vector<zoo::GroundTruth>& labels) {
  if (reports.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "population statistics need a non-empty zoo");
  }
  if (reports.size() != labels.size()) {
    throw Error(ErrorCode::kInvalidArgument, "one label per report required");
  }
  PopulationStats stats;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    PopulationCell& cell =
        labels[i] == zoo::GroundTruth::kTrojan ? stats.trojan : stats.clean;
    const int count = reports[i].Count();
    ++cell.models;
    cell.fraction_with_hijacking += count > 0 ? 1.0 : 0.0;
    cell.mean_head_count += count;
  }
  for (PopulationCell* cell : {&stats.trojan, &stats.clean}) {
    if (cell->models == 0) continue;
    cell->fraction_with_hijacking /= cell->models;
    cell->mean_head_count /= cell->models;
  }
  return stats;
}

std::vector<double> PerLayerCounts(const std::vector<HijackReport>& reports) {
  if (reports.empty()) return {};
  const int layers = reports[0].num_layers;
  std::vector<double> mean(layers, 0.0);
  for (const HijackReport& r : reports) {
    if (r.num_layers != layers) {
      throw Error(ErrorCode::kInvalidArgument, "reports from different architectures");
    }
    const std::vector<int> per_layer = r.PerLayer();
    for (int l = 0; l < layers; ++l) mean[l] += per_layer[l];
  }
  for (double& m : mean) m /= double(reports.size());
  return mean;
}

Matrix AverageAttentionDistance(const std::vector<AttentionTrace>& traces,
                                transformer::Mode mode) {
  CheckTraces(traces);
  const int layers = int(traces[0].attention.size());
  const int heads = int(traces[0].attention[0].size());
  const auto geometry = mode == transformer::Mode::kGrid ? numerics::Geometry::kGrid2d
                                                         : numerics::Geometry::kLine1d;
  Matrix sum = Matrix::Zero(layers, heads);
  for (const AttentionTrace& t : traces) {
    const int n = int(t.tokens.size());
    std::vector<bool> mask(n);
    for (int i = 0; i < n; ++i) mask[i] = t.tokens[i] != TokenKind::kContent;
    const numerics::DistanceMatrix dist = numerics::TokenDistanceMatrix(n, geometry, mask);
    int rows = 0;
    for (int i = 0; i < n; ++i) rows += mask[i] ? 0 : 1;
    if (rows == 0) continue;
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < heads; ++h) {
        const Matrix& a = t.attention[l][h];
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
          if (mask[i]) continue;
          acc += a.row(i).dot(dist.d.row(i));
        }
        sum(l, h) += float(acc / rows);
      }
    }
  }
  return sum / float(traces.size());
}

DistanceProfile ComputeDistanceProfile(const TransformerModel& model,
                                       const std::vector<ModelInput>& clean,
                                       const std::vector<ModelInput>& poisoned,
                                       const std::vector<ModelInput>& spurious) {
  const transformer::Mode mode = model.config.mode;
  DistanceProfile p;
  p.clean = AverageAttentionDistance(transformer::Forward(model, clean), mode);
  p.poisoned = AverageAttentionDistance(transformer::Forward(model, poisoned), mode);
  p.spurious = AverageAttentionDistance(transformer::Forward(model, spurious), mode);
  return p;
}

double DeepLayerMean(const Matrix& per_head) {
  const int layers = int(per_head.rows());
  const int first = layers / 2;  // deepest ceil(L/2) layers
  return per_head.bottomRows(layers - first).mean();
}

double DeepLayerMean(const std::vector<double>& per_layer) {
  const int layers = int(per_layer.size());
  const int first = layers / 2;
  double sum = 0.0;
  for (int l = first; l < layers; ++l) sum += per_layer[l];
  return layers == first ? 0.0 : sum / (layers - first);
}

std::vector<double> LayerCka(const TransformerModel& model,
                             const std::vector<ModelInput>& a,
                             const std::vector<ModelInput>& b) {
  const std::vector<Matrix> pa = PooledHidden(model, a);
  const std::vector<Matrix> pb = PooledHidden(model, b);
  std::vector<double> out;
  for (std::size_t l = 0; l < pa.size(); ++l) {
    out.push_back(numerics::LinearCka(pa[l], pb[l]));
  }
  return out;
}

CkaProfile ComputeCkaProfile(const TransformerModel& model,
                             const std::vector<ModelInput>& clean,
                             const std::vector<ModelInput>& poisoned,
                             const HijackReport& report) {
  CkaProfile p;
  p.deactivated = report.Flagged();
  p.before = LayerCka(model, clean, poisoned);
  if (p.deactivated.empty()) {
    p.after = p.before;
  } else {
    p.after = LayerCka(transformer::DeactivateHeads(model, p.deactivated), clean, poisoned);
  }
  return p;
}

FunctionalityDrop ComputeFunctionalityDrop(
    const TransformerModel& model, const datasets::TaskConfig& task,
    const std::vector<datasets::Sample>& clean,
    const std::vector<datasets::Sample>& poisoned, int target_class,
    const HijackReport& report) {
  FunctionalityDrop d;
  d.before = zoo::EvalModel(model, task, clean, poisoned, target_class);
  const std::set<HeadIndex> flagged = report.Flagged();
  if (flagged.empty()) {
    d.no_hijacking_heads = true;
    d.after = d.before;
    return d;
  }
  d.after = zoo::EvalModel(transformer::DeactivateHeads(model, flagged), task, clean,
                           poisoned, target_class);
  d.delta_clean_accuracy = d.before.clean_accuracy - d.after.clean_accuracy;
  d.delta_asr = d.before.asr - d.after.asr;
  return d;
}

AnalysisSets MakeAnalysisSets(const datasets::TaskConfig& task,
                              const datasets::PoisonSpec& spec, int count,
                              uint64_t seed) {
  if (count < 1) throw Error(ErrorCode::kInvalidArgument, "analysis set size must be >= 1");
  const std::set<int32_t> excluded(spec.trigger.tokens.begin(), spec.trigger.tokens.end());
  AnalysisSets sets;
  // Oversample so that `count` non-target samples remain.
  const int pool_size = count * task.num_classes / (task.num_classes - 1) + task.num_classes;
  const auto pool = datasets::GenerateTask(task, pool_size, seed, excluded);
  for (std::size_t i = 0; i < pool.samples.size() && int(sets.clean.size()) < count; ++i) {
    const datasets::Sample& s = pool.samples[i];
    if (s.label == spec.target_class) continue;
    sets.clean.push_back(s);
    sets.poisoned.push_back(datasets::InjectTrigger(s, spec, task, MixSeed(seed, 2 * i)));
    sets.spurious.push_back(datasets::MakeSpurious(s, spec, task, MixSeed(seed, 2 * i + 1)));
  }
  return sets;
}

AnalysisSets MakeAnalysisSets(const zoo::ZooManifest& manifest,
                              const zoo::ZooEntry& entry, int count) {
  return MakeAnalysisSets(manifest.task, entry.ReferenceSpec(), count,
                          MixSeed(entry.eval_seed, 0xa5a5));
}

Json ToJson(const HijackReport& report) {
  Json heads = Json::array();
  for (const HeadHijack& h : report.heads) {
    heads.push_back(Json{{"layer", h.head.layer},
                         {"head", h.head.head},
                         {"is_hijacking", h.is_hijacking},
                         {"token", h.token < 0 ? Json(nullptr) : Json(h.token)},
                         {"qualifying_samples", h.qualifying_samples},
                         {"row_fractions", h.row_fractions}});
  }
  return Json{{"alpha", report.params.alpha},
              {"beta", report.params.beta},
              {"mode", HijackModeName(report.params.mode)},
              {"dev_fingerprint", report.dev_fingerprint},
              {"num_layers", report.num_layers},
              {"num_heads", report.num_heads},
              {"hijacking_heads", report.Count()},
              {"per_layer", report.PerLayer()},
              {"heads", std::move(heads)}};
}

namespace {
Json MatrixJson(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<float>(m.row(r).begin(), m.row(r).end()));
  }
  return rows;
}
}  // namespace

Json ToJson(const DistanceProfile& p) {
  return Json{{"clean", MatrixJson(p.clean)},
              {"poisoned", MatrixJson(p.poisoned)},
              {"spurious", MatrixJson(p.spurious)}};
}

Json ToJson(const CkaProfile& p) {
  Json heads = Json::array();
  for (const HeadIndex& h : p.deactivated) heads.push_back(h);
  return Json{{"before", p.before}, {"after", p.after}, {"deactivated", heads}};
}

Json ToJson(const FunctionalityDrop& d) {
  return Json{{"no_hijacking_heads", d.no_hijacking_heads},
              {"clean_accuracy_before", d.before.clean_accuracy},
              {"clean_accuracy_after", d.after.clean_accuracy},
              {"asr_before", d.before.asr},
              {"asr_after", d.after.asr},
              {"delta_clean_accuracy", d.delta_clean_accuracy},
              {"delta_asr", d.delta_asr}};
}

}  // namespace ahtd::analysis
