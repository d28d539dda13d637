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

#include "ahtd/detector.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"
#include "ahtd/parallel.h"

namespace ahtd::detector {

using transformer::ModelInput;
using transformer::TokenKind;

namespace {

constexpr uint64_t kStampSalt = 0x57a3b;

std::vector<double> Probabilities(const TransformerModel& model, const ModelInput& in) {
  const RowVector logits = transformer::Logits(model, in);
  const Matrix p = numerics::SoftmaxRows(logits);
  return std::vector<double>(p.data(), p.data() + p.size());
}

// Columns of the stamped candidate in the encoded token layout.
std::vector<int> CandidateColumns(const Sample& stamped, const Candidate& c,
                                  const TaskConfig& task, int offset) {
  std::vector<int> cols;
  if (task.mode == transformer::Mode::kSequence) {
    for (std::size_t i = 0; i < stamped.tokens.size(); ++i) {
      if (std::find(c.payload.tokens.begin(), c.payload.tokens.end(),
                    stamped.tokens[i]) != c.payload.tokens.end()) {
        cols.push_back(int(i) + offset);
      }
    }
  } else {
    cols.push_back(c.payload.patch_row * task.grid_side + c.payload.patch_col + offset);
  }
  return cols;
}

bool OverlapsTrigger(const Perturbation& p, const Perturbation& trigger) {
  if (!trigger.tokens.empty()) {
    for (int32_t t : p.tokens) {
      if (std::find(trigger.tokens.begin(), trigger.tokens.end(), t) != trigger.tokens.end()) {
        return true;
      }
    }
    return false;
  }
  return p.stencil == trigger.stencil && p.patch_row == trigger.patch_row &&
         p.patch_col == trigger.patch_col;
}

double Sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<FilterStats> FilterAll(const TransformerModel& model, const TaskConfig& task,
                                   const std::vector<std::vector<Sample>>& by_class,
                                   const std::vector<Candidate>& candidates,
                                   const FilterParams& params, int jobs) {
  std::vector<FilterStats> stats(candidates.size());
  ParallelFor(jobs, candidates.size(), [&](std::size_t i) {
    stats[i] = FilterCandidate(model, task, by_class, candidates[i], params);
  });
  return stats;
}

void CheckFilterParams(const FilterParams& p) {
  if (!(p.gamma > 0.0 && p.gamma < 1.0) || !(p.epsilon > 0.0 && p.epsilon < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "gamma and epsilon must lie in (0, 1)");
  }
}

}  // namespace

std::vector<Candidate> CandidatePool(const TaskConfig& task, const PoolOptions& options,
                                     uint64_t seed) {
  task.Validate();
  std::vector<Candidate> pool;
  std::mt19937_64 rng(seed);
  if (task.mode == transformer::Mode::kSequence) {
    const int first = task.first_neutral();
    for (int t = 0; t < task.num_neutral_tokens; ++t) {
      Candidate c;
      c.id = int(pool.size());
      c.payload.tokens = {first + t};
      pool.push_back(std::move(c));
    }
    std::set<std::pair<int, int>> seen;
    std::uniform_int_distribution<int> pick(0, task.num_neutral_tokens - 1);
    const int max_phrases = task.num_neutral_tokens * (task.num_neutral_tokens - 1);
    while (int(seen.size()) < std::min(options.phrases, max_phrases)) {
      const int a = pick(rng), b = pick(rng);
      if (a == b || !seen.insert({a, b}).second) continue;
      Candidate c;
      c.id = int(pool.size());
      c.payload.tokens = {first + a, first + b};
      pool.push_back(std::move(c));
    }
    return pool;
  }
  std::vector<datasets::Stencil> patterns(datasets::TriggerPatterns().begin(),
                                          datasets::TriggerPatterns().end());
  std::uniform_int_distribution<int> bit(0, 1);
  while (int(patterns.size()) < datasets::kNumTriggerPatterns + options.random_patterns) {
    datasets::Stencil s;
    for (uint8_t& b : s) b = uint8_t(bit(rng));
    if (std::count(s.begin(), s.end(), 1) < 3) continue;
    if (std::find(patterns.begin(), patterns.end(), s) != patterns.end()) continue;
    patterns.push_back(s);
  }
  for (const datasets::Stencil& s : patterns) {
    for (int r = 0; r < task.grid_side; ++r) {
      for (int col = 0; col < task.grid_side; ++col) {
        Candidate c;
        c.id = int(pool.size());
        c.payload.stencil = s;
        c.payload.patch_row = r;
        c.payload.patch_col = col;
        pool.push_back(std::move(c));
      }
    }
  }
  return pool;
}

FilterParams DefaultFilterParams(transformer::Mode mode) {
  FilterParams p;
  if (mode == transformer::Mode::kGrid) {
    p.gamma = 0.8;
    p.epsilon = 0.1;
  }
  return p;
}

std::vector<Sample> StampAll(const std::vector<Sample>& samples, const Candidate& candidate,
                             const TaskConfig& task) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  const uint64_t base = MixSeed(kStampSalt, uint64_t(int64_t(candidate.id)));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(
        datasets::StampPerturbation(samples[i], candidate.payload, task, MixSeed(base, i)));
  }
  return out;
}

std::vector<std::vector<Sample>> SplitByClass(const std::vector<Sample>& samples,
                                              int num_classes, int per_class) {
  std::vector<std::vector<Sample>> by_class(num_classes);
  for (const Sample& s : samples) {
    if (s.label < 0 || s.label >= num_classes) {
      throw Error(ErrorCode::kInvalidArgument, "clean sample label out of range");
    }
    if (int(by_class[s.label].size()) < per_class) by_class[s.label].push_back(s);
  }
  return by_class;
}

FilterStats FilterCandidate(const TransformerModel& model, const TaskConfig& task,
                            const std::vector<std::vector<Sample>>& by_class,
                            const Candidate& candidate, const FilterParams& params,
                            bool early_stop) {
  CheckFilterParams(params);
  const int classes = model.config.num_classes;
  FilterStats best;
  const uint64_t base = MixSeed(kStampSalt, uint64_t(int64_t(candidate.id)));
  for (int k = 0; k < int(by_class.size()); ++k) {
    const std::vector<Sample>& group = by_class[k];
    const int n = int(group.size());
    if (n == 0) continue;
    std::vector<int> wrong(classes, 0);
    std::vector<double> prob_sum(classes, 0.0);
    int processed = 0;
    bool hopeless = false;
    for (int i = 0; i < n; ++i) {
      const Sample stamped =
          datasets::StampPerturbation(group[i], candidate.payload, task, MixSeed(base, i));
      const std::vector<double> p = Probabilities(model, datasets::Encode(stamped, task));
      const int pred = int(std::max_element(p.begin(), p.end()) - p.begin());
      if (pred != k) ++wrong[pred];
      for (int c = 0; c < classes; ++c) prob_sum[c] += p[c];
      ++processed;
      if (early_stop) {
        const int lead = *std::max_element(wrong.begin(), wrong.end());
        if (double(lead + (n - processed)) <= params.gamma * n) {
          hopeless = true;
          break;
        }
      }
    }
    FilterStats s;
    s.source_class = k;
    s.wrong_label = -1;
    int lead = 0;
    for (int c = 0; c < classes; ++c) {
      if (c != k && wrong[c] > lead) {
        lead = wrong[c];
        s.wrong_label = c;
      }
    }
    if (s.wrong_label < 0) s.wrong_label = k == 0 ? 1 : 0;
    s.mcr = double(lead) / n;
    s.ave_conf = prob_sum[k] / processed;
    s.wrong_confidence = prob_sum[s.wrong_label] / processed;
    s.survived = !hopeless && s.mcr > params.gamma && s.ave_conf < params.epsilon;
    if (s.survived) return s;
    if (best.source_class < 0 || s.mcr > best.mcr) best = s;
  }
  if (best.source_class < 0) {
    throw Error(ErrorCode::kEmptyCleanSet, "no clean samples for the outlier filter");
  }
  return best;
}

std::vector<FilterStats> FilterPool(const TransformerModel& model, const TaskConfig& task,
                                    const std::vector<Sample>& clean_samples,
                                    const std::vector<Candidate>& candidates,
                                    const FilterParams& params, int jobs) {
  CheckFilterParams(params);
  if (clean_samples.empty()) {
    throw Error(ErrorCode::kEmptyCleanSet, "no clean samples for the outlier filter");
  }
  const auto by_class =
      SplitByClass(clean_samples, model.config.num_classes, params.samples_per_class);
  return FilterAll(model, task, by_class, candidates, params, jobs);
}

std::vector<Outlier> OutlierFilter(const TransformerModel& model, const TaskConfig& task,
                                   const std::vector<Sample>& clean_samples,
                                   const std::vector<Candidate>& candidates,
                                   const FilterParams& params, int jobs) {
  const std::vector<FilterStats> stats =
      FilterPool(model, task, clean_samples, candidates, params, jobs);
  std::vector<Outlier> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (stats[i].survived) out.push_back({candidates[i], stats[i]});
  }
  return out;
}

std::array<double, kNumFeatures> FeatureVector::AsArray() const {
  return {num_hijacking_heads,         mean_attention_to_candidate,
          wrong_prediction_confidence, wrong_prediction_accuracy,
          ave_conf_true_label,         max_per_layer_hijack_count};
}

const std::array<const char*, kNumFeatures>& FeatureVector::Names() {
  static const std::array<const char*, kNumFeatures> names = {
      "num_hijacking_heads",         "mean_attention_to_candidate",
      "wrong_prediction_confidence", "wrong_prediction_accuracy",
      "ave_conf_true_label",         "max_per_layer_hijack_count"};
  return names;
}

FeatureVector ExtractFeatures(const TransformerModel& model, const TaskConfig& task,
                              const std::vector<Sample>& clean_samples,
                              const Candidate& candidate, const FilterStats& stats,
                              const FeatureOptions& options) {
  const int count = std::min<int>(options.dev_samples, int(clean_samples.size()));
  const std::vector<Sample> base(clean_samples.begin(), clean_samples.begin() + count);
  const std::vector<Sample> stamped = StampAll(base, candidate, task);
  const std::vector<ModelInput> inputs = datasets::EncodeAll(stamped, task);
  const auto traces = transformer::Forward(model, inputs);
  const analysis::HijackReport report = analysis::DetectHijackingHeads(traces, options.hijack);

  FeatureVector f;
  f.num_hijacking_heads = report.Count();
  const std::vector<int> per_layer = report.PerLayer();
  f.max_per_layer_hijack_count = *std::max_element(per_layer.begin(), per_layer.end());
  f.wrong_prediction_accuracy = stats.mcr;
  f.ave_conf_true_label = stats.ave_conf;
  f.wrong_prediction_confidence = stats.wrong_confidence;

  const std::set<transformer::HeadIndex> flagged = report.Flagged();
  std::vector<transformer::HeadIndex> heads(flagged.begin(), flagged.end());
  if (heads.empty()) {
    for (int l = 0; l < report.num_layers; ++l) {
      for (int h = 0; h < report.num_heads; ++h) heads.push_back({l, h});
    }
  }
  const int offset = model.config.use_class_token ? 1 : 0;
  double total = 0.0;
  for (std::size_t s = 0; s < traces.size(); ++s) {
    const auto& t = traces[s];
    const std::vector<int> cols = CandidateColumns(stamped[s], candidate, task, offset);
    const std::vector<bool> active = analysis::ActiveRows(t.tokens);
    int rows = 0;
    for (bool a : active) rows += a ? 1 : 0;
    if (rows == 0) continue;
    double sample_mass = 0.0;
    for (const auto& hd : heads) {
      const Matrix& a = t.attention[hd.layer][hd.head];
      double mass = 0.0;
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        if (!active[i]) continue;
        for (int c : cols) mass += a(i, c);
      }
      sample_mass += mass / rows;
    }
    total += sample_mass / heads.size();
  }
  f.mean_attention_to_candidate = std::clamp(total / traces.size(), 0.0, 1.0);
  return f;
}

double Discriminator::Score(const FeatureVector& f) const {
  const auto x = f.AsArray();
  double z = bias;
  for (int i = 0; i < kNumFeatures; ++i) z += weights[i] * x[i];
  return Sigmoid(z);
}

Discriminator FitDiscriminator(const std::vector<LabeledFeature>& data,
                               const DiscriminatorHyper& hyper) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < data.size(); ++i) (data[i].positive ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) {
    throw Error(ErrorCode::kInsufficientTrainingData,
                "discriminator needs positive and negative examples");
  }
  // Stratified split.
  std::mt19937_64 rng(hyper.seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<std::size_t> fit, holdout;
  for (const auto* group : {&pos, &neg}) {
    const std::size_t h = std::size_t(std::floor(hyper.holdout_fraction * group->size()));
    const std::size_t held = group->size() >= 2 ? std::max<std::size_t>(h, 1) : 0;
    holdout.insert(holdout.end(), group->begin(), group->begin() + held);
    fit.insert(fit.end(), group->begin() + held, group->end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(holdout.begin(), holdout.end());

  std::array<double, kNumFeatures> mean{}, scale{};
  for (std::size_t i : fit) {
    const auto x = data[i].features.AsArray();
    for (int j = 0; j < kNumFeatures; ++j) mean[j] += x[j];
  }
  for (double& m : mean) m /= fit.size();
  for (std::size_t i : fit) {
    const auto x = data[i].features.AsArray();
    for (int j = 0; j < kNumFeatures; ++j) scale[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
  }
  for (double& s : scale) {
    s = std::sqrt(s / fit.size());
    if (s < 1e-12) s = 1.0;
  }

  // Class-balanced full-batch gradient descent on the logistic loss.
  const double wpos = 0.5 / std::count_if(fit.begin(), fit.end(),
                                          [&](std::size_t i) { return data[i].positive; });
  const double wneg = 0.5 / std::count_if(fit.begin(), fit.end(),
                                          [&](std::size_t i) { return !data[i].positive; });
  std::array<double, kNumFeatures> w{};
  double b = 0.0;
  for (int it = 0; it < hyper.iterations; ++it) {
    std::array<double, kNumFeatures> gw{};
    double gb = 0.0;
    for (std::size_t i : fit) {
      const auto x = data[i].features.AsArray();
      double z = b;
      std::array<double, kNumFeatures> xs;
      for (int j = 0; j < kNumFeatures; ++j) {
        xs[j] = (x[j] - mean[j]) / scale[j];
        z += w[j] * xs[j];
      }
      const double y = data[i].positive ? 1.0 : 0.0;
      const double g = (Sigmoid(z) - y) * (data[i].positive ? wpos : wneg);
      for (int j = 0; j < kNumFeatures; ++j) gw[j] += g * xs[j];
      gb += g;
    }
    for (int j = 0; j < kNumFeatures; ++j) w[j] -= hyper.learning_rate * (gw[j] + hyper.l2 * w[j]);
    b -= hyper.learning_rate * gb;
  }

  Discriminator d;
  d.bias = b;
  for (int j = 0; j < kNumFeatures; ++j) {
    d.weights[j] = w[j] / scale[j];
    d.bias -= w[j] * mean[j] / scale[j];
  }

  // Threshold: best balanced accuracy on the held-out split; midpoint of the
  // widest optimal gap.
  std::vector<std::pair<double, bool>> scored;
  for (std::size_t i : holdout) scored.push_back({d.Score(data[i].features), data[i].positive});
  const auto n_pos = std::count_if(scored.begin(), scored.end(), [](auto& p) { return p.second; });
  const auto n_neg = std::ptrdiff_t(scored.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return d;
  std::sort(scored.begin(), scored.end());
  std::vector<double> cuts = {0.0};
  for (std::size_t i = 0; i + 1 < scored.size(); ++i) {
    if (scored[i].first < scored[i + 1].first) {
      cuts.push_back(0.5 * (scored[i].first + scored[i + 1].first));
    }
  }
  double best_ba = -1.0, best_cut = 0.5;
  for (double cut : cuts) {
    double tp = 0, tn = 0;
    for (const auto& [s, y] : scored) {
      if (y && s > cut) ++tp;
      if (!y && s <= cut) ++tn;
    }
    const double ba = 0.5 * (tp / n_pos + tn / n_neg);
    if (ba > best_ba + 1e-12) {
      best_ba = ba;
      best_cut = cut;
    }
  }
  d.threshold = best_cut;
  return d;
}

DetectorConfig DefaultDetectorConfig(transformer::Mode mode) {
  DetectorConfig c;
  c.filter = DefaultFilterParams(mode);
  return c;
}

std::vector<Sample> DefenderCleanSet(const TaskConfig& task, int count, uint64_t seed) {
  return datasets::GenerateTask(task, count, seed).samples;
}

std::vector<ScoredOutlier> ScoreSurvivors(const TransformerModel& model,
                                          const TaskConfig& task,
                                          const std::vector<Sample>& clean_samples,
                                          const std::vector<Candidate>& pool,
                                          const DetectorConfig& config) {
  const std::vector<Outlier> survivors =
      OutlierFilter(model, task, clean_samples, pool, config.filter, config.jobs);
  std::vector<ScoredOutlier> out(survivors.size());
  ParallelFor(config.jobs, survivors.size(), [&](std::size_t i) {
    out[i].outlier = survivors[i];
    out[i].features = ExtractFeatures(model, task, clean_samples, survivors[i].candidate,
                                      survivors[i].stats, config.features);
  });
  return out;
}

DetectionVerdict UnsupervisedVerdict(std::vector<ScoredOutlier> outliers,
                                     const DetectorConfig& config) {
  DetectionVerdict v;
  v.mode = DetectionMode::kUnsupervised;
  v.filter = config.filter;
  v.hijack = config.features.hijack;
  for (ScoredOutlier& o : outliers) {
    o.score = o.features.num_hijacking_heads;
    v.score = std::max(v.score, o.score);
    if (o.features.num_hijacking_heads >= 1) v.is_trojan = true;
  }
  v.outliers = std::move(outliers);
  return v;
}

DetectionVerdict SupervisedVerdict(std::vector<ScoredOutlier> outliers,
                                   const Discriminator& discriminator,
                                   const DetectorConfig& config) {
  DetectionVerdict v;
  v.mode = DetectionMode::kSupervised;
  v.filter = config.filter;
  v.hijack = config.features.hijack;
  for (ScoredOutlier& o : outliers) {
    o.score = discriminator.Score(o.features);
    v.score = std::max(v.score, o.score);
    if (o.score > discriminator.threshold) v.is_trojan = true;
  }
  v.outliers = std::move(outliers);
  return v;
}

DetectionVerdict DetectUnsupervised(const TransformerModel& model, const TaskConfig& task,
                                    const std::vector<Sample>& clean_samples,
                                    const std::vector<Candidate>& pool,
                                    const DetectorConfig& config) {
  if (pool.empty()) throw Error(ErrorCode::kInvalidArgument, "empty candidate pool");
  return UnsupervisedVerdict(ScoreSurvivors(model, task, clean_samples, pool, config),
                             config);
}

DetectionVerdict DetectSupervised(const TransformerModel& model, const TaskConfig& task,
                                  const std::vector<Sample>& clean_samples,
                                  const std::vector<Candidate>& pool,
                                  const Discriminator& discriminator,
                                  const DetectorConfig& config) {
  if (pool.empty()) throw Error(ErrorCode::kInvalidArgument, "empty candidate pool");
  return SupervisedVerdict(ScoreSurvivors(model, task, clean_samples, pool, config),
                           discriminator, config);
}

TrainingSet EntryTrainingSet(const zoo::ZooEntry& entry, const TransformerModel& model,
                             const TaskConfig& task, const std::vector<Sample>& clean_samples,
                             const std::vector<Candidate>& pool,
                             const std::vector<FilterStats>& stats,
                             const std::vector<ScoredOutlier>& survivors,
                             const DetectorConfig& config) {
  if (stats.size() != pool.size() || pool.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "filter stats must cover the candidate pool");
  }
  const bool trojan = entry.label == zoo::GroundTruth::kTrojan;
  TrainingSet set;
  for (const ScoredOutlier& o : survivors) {
    if (trojan && OverlapsTrigger(o.outlier.candidate.payload, entry.spec->trigger)) continue;
    set.examples.push_back({o.features, false});
    ++set.negatives;
  }
  const auto by_class = SplitByClass(clean_samples, model.config.num_classes,
                                     config.filter.samples_per_class);
  if (trojan) {
    Candidate trigger;
    trigger.id = -1;
    trigger.payload = entry.spec->trigger;
    const FilterStats s = FilterCandidate(model, task, by_class, trigger, config.filter, false);
    set.examples.push_back(
        {ExtractFeatures(model, task, clean_samples, trigger, s, config.features), true});
    ++set.positives;
  } else if (set.negatives == 0) {
    std::size_t top = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (stats[i].mcr > stats[top].mcr) top = i;
    }
    const FilterStats s =
        FilterCandidate(model, task, by_class, pool[top], config.filter, false);
    set.examples.push_back(
        {ExtractFeatures(model, task, clean_samples, pool[top], s, config.features), false});
    ++set.negatives;
  }
  return set;
}

TrainingSet CollectTrainingSet(const zoo::ZooManifest& manifest,
                               const std::vector<const zoo::ZooEntry*>& entries,
                               const std::string& zoo_dir, const DetectorConfig& config,
                               uint64_t seed) {
  const TaskConfig& task = manifest.task;
  const std::vector<Candidate> pool = CandidatePool(task, config.pool, config.pool_seed);
  TrainingSet set;
  for (const zoo::ZooEntry* entry : entries) {
    const TransformerModel model = zoo::LoadEntryModel(*entry, zoo_dir);
    const std::vector<Sample> clean =
        DefenderCleanSet(task, config.clean_samples, MixSeed(seed, entry->train_seed));
    const std::vector<FilterStats> stats =
        FilterPool(model, task, clean, pool, config.filter, config.jobs);
    std::vector<ScoredOutlier> survivors;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!stats[i].survived) continue;
      ScoredOutlier o;
      o.outlier = {pool[i], stats[i]};
      o.features = ExtractFeatures(model, task, clean, pool[i], stats[i], config.features);
      survivors.push_back(std::move(o));
    }
    TrainingSet one = EntryTrainingSet(*entry, model, task, clean, pool, stats, survivors, config);
    set.examples.insert(set.examples.end(), one.examples.begin(), one.examples.end());
    set.positives += one.positives;
    set.negatives += one.negatives;
  }
  return set;
}

Discriminator TrainDiscriminator(const zoo::ZooManifest& manifest,
                                 const std::vector<const zoo::ZooEntry*>& entries,
                                 const std::string& zoo_dir, const DetectorConfig& config,
                                 const DiscriminatorHyper& hyper) {
  int trojans = 0, cleans = 0;
  for (const zoo::ZooEntry* e : entries) {
    (e->label == zoo::GroundTruth::kTrojan ? trojans : cleans) += 1;
  }
  if (trojans < 4 || cleans < 4) {
    throw Error(ErrorCode::kInsufficientTrainingData,
                "need at least 4 trojan and 4 clean models, got " +
                    std::to_string(trojans) + " and " + std::to_string(cleans));
  }
  const TrainingSet set = CollectTrainingSet(manifest, entries, zoo_dir, config, hyper.seed);
  return FitDiscriminator(set.examples, hyper);
}

std::string_view DetectionModeName(DetectionMode mode) {
  return mode == DetectionMode::kUnsupervised ? "unsupervised" : "supervised";
}

double RocAuc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return pairs == 0 ? 0.5 : wins / pairs;
}

DetectorMetrics EvaluateDetector(const std::vector<bool>& is_trojan,
                                 const std::vector<DetectionVerdict>& verdicts) {
  if (is_trojan.size() != verdicts.size() || verdicts.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "one verdict per model required");
  }
  DetectorMetrics m;
  std::vector<double> scores;
  int correct = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    correct += verdicts[i].is_trojan == is_trojan[i] ? 1 : 0;
    scores.push_back(verdicts[i].score);
  }
  m.accuracy = double(correct) / verdicts.size();
  m.auc = RocAuc(scores, is_trojan);
  return m;
}

Json ToJson(const FeatureVector& f) {
  Json j;
  const auto x = f.AsArray();
  for (int i = 0; i < kNumFeatures; ++i) j[FeatureVector::Names()[i]] = x[i];
  return j;
}

Json ToJson(const DetectionVerdict& v) {
  Json outliers = Json::array();
  for (const ScoredOutlier& o : v.outliers) {
    outliers.push_back(Json{{"candidate_id", o.outlier.candidate.id},
                            {"payload", o.outlier.candidate.payload},
                            {"source_class", o.outlier.stats.source_class},
                            {"wrong_label", o.outlier.stats.wrong_label},
                            {"features", ToJson(o.features)},
                            {"score", o.score}});
  }
  return Json{{"is_trojan", v.is_trojan},
              {"mode", DetectionModeName(v.mode)},
              {"score", v.score},
              {"gamma", v.filter.gamma},
              {"epsilon", v.filter.epsilon},
              {"alpha", v.hijack.alpha},
              {"beta", v.hijack.beta},
              {"outliers", std::move(outliers)}};
}

void WriteDiscriminator(const Discriminator& d, std::ostream& out) {
  Json features = Json::array();
  for (const char* name : FeatureVector::Names()) features.push_back(name);
  const Json j{{"format", "ahtd-discriminator"},
               {"schema_version", kFeatureSchemaVersion},
               {"features", features},
               {"weights", d.weights},
               {"bias", d.bias},
               {"threshold", d.threshold}};
  out << j.dump(2) << '\n';
}

Discriminator ReadDiscriminator(std::istream& in) {
  std::stringstream buffer;
  buffer << in.rdbuf();
  const Json j = ParseJson(buffer.str(), "discriminator");
  Discriminator d;
  try {
    if (j.at("format") != "ahtd-discriminator") {
      throw Error(ErrorCode::kParseError, "not a discriminator file");
    }
    if (j.at("schema_version").get<int>() != kFeatureSchemaVersion ||
        j.at("features").size() != kNumFeatures) {
      throw Error(ErrorCode::kParseError, "discriminator feature schema mismatch");
    }
    for (int i = 0; i < kNumFeatures; ++i) {
      if (j.at("features")[i] != FeatureVector::Names()[i]) {
        throw Error(ErrorCode::kParseError, "discriminator feature order mismatch");
      }
    }
    d.weights = j.at("weights").get<std::array<double, kNumFeatures>>();
    d.bias = j.at("bias").get<double>();
    d.threshold = j.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("discriminator: ") + e.what());
  }
  return d;
}

void SaveDiscriminator(const Discriminator& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path);
  WriteDiscriminator(d, out);
}

Discriminator LoadDiscriminator(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path);
  return ReadDiscriminator(in);
}

}  // namespace ahtd::detector
