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


#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "ahtd/detector.h"
#include "ahtd/error.h"
#include "test_util.h"

namespace ahtd::detector {
namespace {

constexpr int kTarget = 1;

// One-layer model that predicts kTarget whenever token `switch_token` is
// present and class 0 otherwise. Every other token embeds to zero, so
// inserting any other token leaves the prediction unchanged.
TransformerModel SwitchModel(const TaskConfig& task, int switch_token) {
  transformer::ModelConfig arch;
  arch.num_layers = 1;
  arch.num_heads = 1;
  arch.hidden_dim = 4;
  arch.ffn_dim = 4;
  TransformerModel m = transformer::ZeroModel(datasets::ModelConfigFor(task, arch));
  auto& p = m.params;
  p.token_embedding(switch_token, 0) = 4.0f;
  p.token_embedding(switch_token, 1) = -4.0f;
  auto& layer = p.layers[0];
  layer.ln1_gain.setOnes();
  layer.wv.setIdentity();
  layer.wo.setIdentity();
  p.final_ln_gain.setOnes();
  p.head_weight(0, kTarget) = 10.0f;
  p.head_weight(1, kTarget) = -10.0f;
  p.head_bias(0, 0) = 5.0f;
  return m;
}

class FilterBoundaryTest : public ::testing::Test {
 protected:
  void SetUp() override {
    task_ = testing::SmallSequenceTask();
    switch_token_ = task_.first_neutral();
    model_ = SwitchModel(task_, switch_token_);
    inert_.id = 0;
    inert_.payload.tokens = {task_.first_neutral() + 1};
  }

  // Ten class-0 samples, `flipping` of which carry the switch token.
  std::vector<std::vector<Sample>> Samples(int flipping) const {
    std::vector<std::vector<Sample>> by_class(task_.num_classes);
    for (int i = 0; i < 10; ++i) {
      Sample s;
      s.tokens = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
      if (i < flipping) s.tokens[2] = switch_token_;
      by_class[0].push_back(s);
    }
    return by_class;
  }

  TaskConfig task_;
  int switch_token_ = 0;
  TransformerModel model_;
  Candidate inert_;
};

TEST_F(FilterBoundaryTest, MisclassificationRateMustExceedGamma) {
  const FilterParams at_boundary{0.9, 0.5, 10};
  const FilterStats nine = FilterCandidate(model_, task_, Samples(9), inert_, at_boundary, false);
  EXPECT_EQ(nine.mcr, 0.9);
  EXPECT_EQ(nine.wrong_label, kTarget);
  EXPECT_LT(nine.ave_conf, 0.5);
  EXPECT_FALSE(nine.survived);
  EXPECT_FALSE(FilterCandidate(model_, task_, Samples(9), inert_, at_boundary, true).survived);

  EXPECT_TRUE(FilterCandidate(model_, task_, Samples(9), inert_, {0.89, 0.5, 10}).survived);

  const FilterStats ten = FilterCandidate(model_, task_, Samples(10), inert_, at_boundary);
  EXPECT_EQ(ten.mcr, 1.0);
  EXPECT_TRUE(ten.survived);
  EXPECT_GT(ten.wrong_confidence, 0.99);
}

TEST_F(FilterBoundaryTest, ConfidenceMustStayBelowEpsilon) {
  const FilterStats s = FilterCandidate(model_, task_, Samples(9), inert_, {0.5, 0.5, 10}, false);
  EXPECT_FALSE(FilterCandidate(model_, task_, Samples(9), inert_, {0.5, s.ave_conf, 10}).survived);
  EXPECT_TRUE(
      FilterCandidate(model_, task_, Samples(9), inert_, {0.5, s.ave_conf * 1.01, 10}).survived);
}

TEST_F(FilterBoundaryTest, TheSwitchTokenItselfIsAnOutlier) {
  std::vector<Sample> clean;
  for (const auto& group : Samples(0)) clean.insert(clean.end(), group.begin(), group.end());
  Candidate sw;
  sw.id = 1;
  sw.payload.tokens = {switch_token_};
  const auto survivors = OutlierFilter(model_, task_, clean, {inert_, sw}, {0.9, 0.05, 10});
  ASSERT_EQ(survivors.size(), 1u);
  EXPECT_EQ(survivors[0].candidate.id, 1);
  EXPECT_EQ(survivors[0].stats.source_class, 0);
}

TEST(FilterTest, MonotoneInGammaAndEpsilon) {
  const TaskConfig task = testing::SmallSequenceTask();
  const auto config = datasets::ModelConfigFor(task, testing::SmallArchitecture());
  const std::vector<Candidate> pool = CandidatePool(task, {20, 0}, 3);
  std::mt19937_64 rng(17);
  int survived_somewhere = 0, rejected_somewhere = 0;
  for (int trial = 0; trial < 100; ++trial) {
    TransformerModel model = transformer::RandomModel(config, 1000 + trial);
    model.params.head_bias(0, trial % task.num_classes) = float(trial % 7);
    const auto by_class =
        SplitByClass(datasets::GenerateTask(task, 30, trial).samples, task.num_classes, 10);
    const Candidate& c = pool[rng() % pool.size()];
    bool previous = true;
    for (double gamma = 0.05; gamma < 1.0; gamma += 0.05) {
      const FilterParams params{gamma, 0.6, 10};
      const bool s = FilterCandidate(model, task, by_class, c, params, false).survived;
      EXPECT_EQ(FilterCandidate(model, task, by_class, c, params, true).survived, s);
      EXPECT_TRUE(previous || !s) << "trial " << trial << " gamma " << gamma;
      previous = s;
      survived_somewhere += s;
      rejected_somewhere += !s;
    }
    previous = false;
    for (double eps = 0.05; eps < 1.0; eps += 0.05) {
      const bool s = FilterCandidate(model, task, by_class, c, {0.3, eps, 10}, false).survived;
      EXPECT_TRUE(!previous || s) << "trial " << trial << " epsilon " << eps;
      previous = s;
    }
  }
  EXPECT_GT(survived_somewhere, 0);
  EXPECT_GT(rejected_somewhere, 0);
}

TEST(FilterTest, SurvivorsDoNotDependOnPoolOrder) {
  const TaskConfig task = testing::SmallSequenceTask();
  const auto model = transformer::RandomModel(
      datasets::ModelConfigFor(task, testing::SmallArchitecture()), 5);
  const auto clean = datasets::GenerateTask(task, 30, 2).samples;
  std::vector<Candidate> pool = CandidatePool(task, {10, 0}, 1);
  auto ids = [&](const std::vector<Candidate>& p) {
    std::set<int> out;
    for (const Outlier& o : OutlierFilter(model, task, clean, p, {0.5, 0.6, 10})) {
      out.insert(o.candidate.id);
    }
    return out;
  };
  const std::set<int> forward = ids(pool);
  std::shuffle(pool.begin(), pool.end(), std::mt19937_64(4));
  EXPECT_EQ(ids(pool), forward);
  EXPECT_EQ(ids(pool), ids(pool));
}

TEST(FilterTest, ErrorsAndDefaults) {
  const TaskConfig task = testing::SmallSequenceTask();
  const auto model = transformer::RandomModel(
      datasets::ModelConfigFor(task, testing::SmallArchitecture()), 5);
  const auto pool = CandidatePool(task, {}, 0);
  try {
    OutlierFilter(model, task, {}, pool, {});
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyCleanSet);
  }
  EXPECT_THROW(OutlierFilter(model, task, datasets::GenerateTask(task, 6, 1).samples, pool,
                             {1.0, 0.05, 10}),
               Error);
  EXPECT_EQ(DefaultFilterParams(transformer::Mode::kSequence).gamma, 0.9);
  EXPECT_EQ(DefaultFilterParams(transformer::Mode::kSequence).epsilon, 0.05);
  EXPECT_EQ(DefaultFilterParams(transformer::Mode::kGrid).gamma, 0.8);
  EXPECT_EQ(DefaultFilterParams(transformer::Mode::kGrid).epsilon, 0.1);
}

TEST(PoolTest, Composition) {
  const TaskConfig seq = testing::SmallSequenceTask();
  const auto pool = CandidatePool(seq, {25, 0}, 9);
  ASSERT_EQ(int(pool.size()), seq.num_neutral_tokens + 25);
  std::set<std::vector<int32_t>> distinct;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_EQ(pool[i].id, int(i));
    for (int32_t t : pool[i].payload.tokens) EXPECT_TRUE(seq.IsNeutral(t));
    distinct.insert(pool[i].payload.tokens);
  }
  EXPECT_EQ(distinct.size(), pool.size());

  TaskConfig grid;
  grid.mode = transformer::Mode::kGrid;
  grid.num_classes = 4;
  const auto patterns = CandidatePool(grid, {0, 10}, 9);
  EXPECT_EQ(int(patterns.size()), (datasets::kNumTriggerPatterns + 10) * grid.num_patches());
  EXPECT_EQ(patterns[0].payload.stencil, datasets::TriggerPatterns()[0]);
}

TEST(FeatureTest, ValuesStayInRange) {
  const TaskConfig task = testing::SmallSequenceTask();
  const auto config = datasets::ModelConfigFor(task, testing::SmallArchitecture());
  const auto clean = datasets::GenerateTask(task, 20, 4).samples;
  const auto pool = CandidatePool(task, {5, 0}, 2);
  const int heads = config.num_layers * config.num_heads;
  for (int seed = 0; seed < 5; ++seed) {
    const auto model = transformer::RandomModel(config, seed);
    const auto by_class = SplitByClass(clean, task.num_classes, 10);
    for (std::size_t c = 0; c < pool.size(); c += 7) {
      const FilterStats stats =
          FilterCandidate(model, task, by_class, pool[c], {0.5, 0.5, 10}, false);
      const FeatureVector f =
          ExtractFeatures(model, task, clean, pool[c], stats, {{0.2, 3}, 10});
      EXPECT_GE(f.num_hijacking_heads, 0);
      EXPECT_LE(f.num_hijacking_heads, heads);
      EXPECT_LE(f.max_per_layer_hijack_count, config.num_heads);
      EXPECT_LE(f.max_per_layer_hijack_count, f.num_hijacking_heads);
      for (double v : {f.mean_attention_to_candidate, f.wrong_prediction_confidence,
                       f.wrong_prediction_accuracy, f.ave_conf_true_label}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_EQ(f.wrong_prediction_accuracy, stats.mcr);
      EXPECT_EQ(f.ave_conf_true_label, stats.ave_conf);
    }
  }
  EXPECT_EQ(ToJson(FeatureVector{}).size(), std::size_t(kNumFeatures));
}

TEST(MetricsTest, MannWhitneyFixture) {
  // Pairs: (0.9,0.4) win, (0.9,0.1) win, (0.4,0.4) tie, (0.4,0.1) win.
  EXPECT_DOUBLE_EQ(RocAuc({0.9, 0.4, 0.4, 0.1}, {true, true, false, false}), 3.5 / 4.0);
  EXPECT_DOUBLE_EQ(RocAuc({0.1, 0.2, 0.8, 0.9}, {true, true, false, false}), 0.0);
  EXPECT_DOUBLE_EQ(RocAuc({1, 1, 1, 1}, {true, false, true, false}), 0.5);
  EXPECT_DOUBLE_EQ(RocAuc({0.3, 0.7}, {true, true}), 0.5);
}

TEST(MetricsTest, EvaluateDetector) {
  auto verdict = [](bool trojan, double score) {
    DetectionVerdict v;
    v.is_trojan = trojan;
    v.score = score;
    return v;
  };
  const std::vector<bool> truth = {true, true, false, false};
  const DetectorMetrics perfect = EvaluateDetector(
      truth, {verdict(true, 3), verdict(true, 2), verdict(false, 0), verdict(false, 1)});
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.auc, 1.0);
  const DetectorMetrics constant = EvaluateDetector(
      truth, {verdict(true, 1), verdict(true, 1), verdict(true, 1), verdict(true, 1)});
  EXPECT_EQ(constant.accuracy, 0.5);
  EXPECT_EQ(constant.auc, 0.5);
  EXPECT_THROW(EvaluateDetector(truth, {}), Error);
}

std::vector<LabeledFeature> Gaussian(int n, double shift, std::mt19937_64& rng,
                                     bool random_labels) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<LabeledFeature> out;
  for (int i = 0; i < n; ++i) {
    const bool positive = i % 2 == 0;
    FeatureVector f;
    const double s = random_labels ? 0.0 : (positive ? shift : -shift);
    f.num_hijacking_heads = s + noise(rng);
    f.mean_attention_to_candidate = 0.5 * s + noise(rng);
    f.wrong_prediction_confidence = noise(rng);
    f.wrong_prediction_accuracy = noise(rng);
    f.ave_conf_true_label = noise(rng);
    f.max_per_layer_hijack_count = noise(rng);
    out.push_back({f, random_labels ? coin(rng) : positive});
  }
  return out;
}

double Accuracy(const Discriminator& d, const std::vector<LabeledFeature>& data) {
  int correct = 0;
  for (const auto& x : data) correct += d.IsTrojan(x.features) == x.positive;
  return double(correct) / data.size();
}

TEST(DiscriminatorTest, SeparableDataIsLearned) {
  std::mt19937_64 rng(1);
  const auto train = Gaussian(80, 5.0, rng, false);
  const auto test = Gaussian(200, 5.0, rng, false);
  const Discriminator d = FitDiscriminator(train, {});
  EXPECT_EQ(Accuracy(d, train), 1.0);
  EXPECT_EQ(Accuracy(d, test), 1.0);
}

TEST(DiscriminatorTest, RandomLabelsGiveChance) {
  std::mt19937_64 rng(2);
  const auto train = Gaussian(200, 0.0, rng, true);
  const auto test = Gaussian(2000, 0.0, rng, true);
  EXPECT_NEAR(Accuracy(FitDiscriminator(train, {}), test), 0.5, 0.1);
}

TEST(DiscriminatorTest, ZeroWeightsSayClean) {
  const Discriminator d;
  EXPECT_DOUBLE_EQ(d.Score(FeatureVector{}), 0.5);
  EXPECT_FALSE(d.IsTrojan(FeatureVector{}));
  FeatureVector big;
  big.num_hijacking_heads = 100;
  EXPECT_FALSE(d.IsTrojan(big));
}

TEST(DiscriminatorTest, NeedsBothLabels) {
  std::mt19937_64 rng(3);
  auto data = Gaussian(10, 1.0, rng, false);
  for (auto& x : data) x.positive = true;
  try {
    FitDiscriminator(data, {});
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientTrainingData);
  }
}

TEST(DiscriminatorTest, FileRoundTripIsExact) {
  std::mt19937_64 rng(4);
  const Discriminator d = FitDiscriminator(Gaussian(40, 1.0, rng, false), {});
  std::stringstream s;
  WriteDiscriminator(d, s);
  const Discriminator back = ReadDiscriminator(s);
  EXPECT_EQ(back.weights, d.weights);
  EXPECT_EQ(back.bias, d.bias);
  EXPECT_EQ(back.threshold, d.threshold);
  std::stringstream bad("{\"weights\": [1, 2]}");
  EXPECT_THROW(ReadDiscriminator(bad), Error);
}

TEST(VerdictTest, NoSurvivorsMeansClean) {
  const DetectorConfig config = DefaultDetectorConfig(transformer::Mode::kSequence);
  const DetectionVerdict u = UnsupervisedVerdict({}, config);
  EXPECT_FALSE(u.is_trojan);
  EXPECT_EQ(u.score, 0.0);
  Discriminator eager;
  eager.bias = 10.0;
  EXPECT_FALSE(SupervisedVerdict({}, eager, config).is_trojan);
}

TEST(VerdictTest, ExistenceRule) {
  const DetectorConfig config = DefaultDetectorConfig(transformer::Mode::kSequence);
  ScoredOutlier quiet, loud;
  loud.features.num_hijacking_heads = 2;
  EXPECT_FALSE(UnsupervisedVerdict({quiet, quiet}, config).is_trojan);
  const DetectionVerdict v = UnsupervisedVerdict({quiet, loud}, config);
  EXPECT_TRUE(v.is_trojan);
  EXPECT_EQ(v.score, 2.0);
}

TEST(TrainingTest, TooFewModelsPerLabel) {
  zoo::ZooManifest manifest;
  manifest.task = testing::SmallSequenceTask();
  std::vector<zoo::ZooEntry> entries(7);
  std::vector<const zoo::ZooEntry*> refs;
  for (int i = 0; i < 7; ++i) {
    entries[i].label = i < 4 ? zoo::GroundTruth::kClean : zoo::GroundTruth::kTrojan;
    refs.push_back(&entries[i]);
  }
  try {
    TrainDiscriminator(manifest, refs, "/nonexistent", {}, {});
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientTrainingData);
  }
}

}  // namespace
}  // namespace ahtd::detector
