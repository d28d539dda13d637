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

#include <cmath>
#include <map>
#include <sstream>

#include "ahtd/datasets.h"
#include "ahtd/error.h"
#include "test_util.h"

namespace ahtd::datasets {
namespace {

using testing::SoftmaxRegression;

TaskConfig GridTask() {
  TaskConfig t;
  t.mode = Mode::kGrid;
  t.num_classes = 4;
  return t;
}

// Chi-square upper quantile by the Wilson-Hilferty approximation.
double ChiSquareCritical(int df, double z) {
  const double k = df;
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1.0 - a + z * std::sqrt(a), 3.0);
}

std::pair<Eigen::MatrixXd, std::vector<int>> BagOfTokens(const LabeledDataset& d) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(d.samples.size(), d.task.vocab_size());
  std::vector<int> y;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    for (int32_t t : d.samples[i].tokens) x(i, t) += 1.0;
    y.push_back(d.samples[i].label);
  }
  return {x, y};
}

std::pair<Eigen::MatrixXd, std::vector<int>> Pixels(const LabeledDataset& d) {
  const int dim = d.task.image_side() * d.task.image_side();
  Eigen::MatrixXd x(d.samples.size(), dim);
  std::vector<int> y;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    for (int j = 0; j < dim; ++j) x(i, j) = d.samples[i].pixels[j];
    y.push_back(d.samples[i].label);
  }
  return {x, y};
}

TEST(SequenceTaskTest, LinearOracleSeparates) {
  const TaskConfig task;
  const auto [x, y] = BagOfTokens(GenerateSequenceTask(task, 2000, 7));
  const SoftmaxRegression oracle(x.topRows(1500), {y.begin(), y.begin() + 1500},
                                 task.num_classes);
  EXPECT_GE(oracle.Accuracy(x.bottomRows(500), {y.begin() + 1500, y.end()}), 0.95);
}

TEST(SequenceTaskTest, DeterministicAndBalanced) {
  const TaskConfig task;
  const LabeledDataset a = GenerateSequenceTask(task, 301, 5);
  EXPECT_EQ(a, GenerateSequenceTask(task, 301, 5));
  EXPECT_NE(a, GenerateSequenceTask(task, 301, 6));
  std::map<int, int> counts;
  for (const Sample& s : a.samples) {
    ++counts[s.label];
    EXPECT_GE(int(s.tokens.size()), task.min_length);
    EXPECT_LE(int(s.tokens.size()), task.content_slots);
  }
  EXPECT_LE(std::abs(counts[0] - counts[1]), 1);
}

TEST(SequenceTaskTest, NeutralTokensIndependentOfClass) {
  const TaskConfig task;
  const LabeledDataset d = GenerateSequenceTask(task, 2000, 7);
  std::vector<std::vector<double>> table(task.num_classes,
                                         std::vector<double>(task.num_neutral_tokens, 0.0));
  for (const Sample& s : d.samples) {
    for (int32_t t : s.tokens) {
      if (task.IsNeutral(t)) table[s.label][t - task.first_neutral()] += 1.0;
    }
  }
  std::vector<double> row(task.num_classes, 0.0), col(task.num_neutral_tokens, 0.0);
  double total = 0.0;
  for (int c = 0; c < task.num_classes; ++c) {
    for (int k = 0; k < task.num_neutral_tokens; ++k) {
      row[c] += table[c][k];
      col[k] += table[c][k];
      total += table[c][k];
    }
  }
  double chi2 = 0.0;
  for (int c = 0; c < task.num_classes; ++c) {
    for (int k = 0; k < task.num_neutral_tokens; ++k) {
      const double expected = row[c] * col[k] / total;
      chi2 += (table[c][k] - expected) * (table[c][k] - expected) / expected;
    }
  }
  const int df = (task.num_classes - 1) * (task.num_neutral_tokens - 1);
  EXPECT_LT(chi2, ChiSquareCritical(df, 1.6449));
}

TEST(SequenceTaskTest, ExcludedTokensNeverAppear) {
  const TaskConfig task;
  const std::set<int32_t> excluded = {task.first_neutral() + 3, task.first_neutral() + 10};
  for (const Sample& s : GenerateSequenceTask(task, 500, 2, excluded).samples) {
    for (int32_t t : s.tokens) EXPECT_FALSE(excluded.count(t));
  }
}

TEST(GridTaskTest, LinearOracleSeparates) {
  const TaskConfig task = GridTask();
  const auto [x, y] = Pixels(GenerateGridTask(task, 2000, 7));
  const SoftmaxRegression oracle(x.topRows(1500), {y.begin(), y.begin() + 1500},
                                 task.num_classes);
  EXPECT_GE(oracle.Accuracy(x.bottomRows(500), {y.begin() + 1500, y.end()}), 0.95);
}

TEST(GridTaskTest, DeterministicAndBalanced) {
  const TaskConfig task = GridTask();
  const LabeledDataset a = GenerateGridTask(task, 400, 3);
  EXPECT_EQ(a, GenerateGridTask(task, 400, 3));
  std::map<int, int> counts;
  for (const Sample& s : a.samples) {
    ++counts[s.label];
    EXPECT_EQ(int(s.pixels.size()), task.image_side() * task.image_side());
  }
  for (int c = 0; c < task.num_classes; ++c) EXPECT_EQ(counts[c], 100);
}

TEST(InjectTest, SequenceInsertionAtFixedIndex) {
  const TaskConfig task;
  Sample s;
  s.tokens = {5, 9, 2};
  Perturbation p;
  p.tokens = {77};
  p.position = 1;
  ASSERT_TRUE(task.IsNeutral(77));
  const Sample out = ApplyPerturbation(s, p, task, 0);
  EXPECT_EQ(out.tokens, (std::vector<int32_t>{5, 77, 9, 2}));
  EXPECT_EQ(out.label, s.label);

  std::vector<int32_t> restored = out.tokens;
  restored.erase(restored.begin() + 1);
  EXPECT_EQ(restored, s.tokens);
}

TEST(InjectTest, CollisionThrows) {
  const TaskConfig task;
  Sample s;
  s.tokens = {5, 77, 2};
  Perturbation p;
  p.tokens = {77};
  try {
    ApplyPerturbation(s, p, task, 0);
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTriggerCollision);
  }
}

TEST(InjectTest, FullSequenceKeepsTrigger) {
  const TaskConfig task;
  const LabeledDataset d = GenerateSequenceTask(task, 50, 1, {100});
  Perturbation p;
  p.tokens = {100, 101};
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Sample out = StampPerturbation(d.samples[i], p, task, i);
    EXPECT_LE(int(out.tokens.size()), task.content_slots);
    EXPECT_TRUE(ContainsPerturbation(out, p, task));
  }
}

TEST(InjectTest, GridPatchIsLocal) {
  const TaskConfig task = GridTask();
  const Sample s = GenerateGridTask(task, 4, 9).samples[0];
  PoisonSpec spec;
  spec.pattern_id = 0;  // summation
  spec.trigger.stencil = TriggerPatterns()[0];
  spec.trigger.patch_row = 0;
  spec.trigger.patch_col = 0;
  const Sample out = InjectTrigger(s, spec, task, 0);
  const int side = task.image_side();
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const bool inside = r < task.patch_side && c < task.patch_side;
      if (!inside) EXPECT_EQ(out.pixels[r * side + c], s.pixels[r * side + c]);
    }
  }
  EXPECT_TRUE(ContainsPerturbation(out, spec.trigger, task));
}

TEST(PoisonTest, ExactCountAndRelabeling) {
  const TaskConfig task;
  const LabeledDataset clean = GenerateSequenceTask(task, 1000, 4, {150});
  PoisonSpec spec;
  spec.trigger.tokens = {150};
  spec.target_class = 1;
  spec.poison_rate = 0.10;
  const LabeledDataset p = PoisonDataset(clean, spec, 8);
  int poisoned = 0;
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    const Sample& s = p.samples[i];
    if (s.provenance == Provenance::kPoisoned) {
      ++poisoned;
      EXPECT_EQ(s.label, spec.target_class);
      EXPECT_NE(clean.samples[i].label, spec.target_class);
      EXPECT_TRUE(ContainsPerturbation(s, spec.trigger, task));
    } else {
      EXPECT_EQ(s, clean.samples[i]);
    }
  }
  EXPECT_EQ(poisoned, 100);
}

TEST(PoisonTest, DeterministicIndexSet) {
  const TaskConfig task;
  const LabeledDataset clean = GenerateSequenceTask(task, 400, 4, {150});
  PoisonSpec spec;
  spec.trigger.tokens = {150};
  spec.poison_rate = 0.15;
  EXPECT_EQ(PoisonDataset(clean, spec, 3), PoisonDataset(clean, spec, 3));
}

TEST(PoisonTest, RateOutsideRangeThrows) {
  const TaskConfig task;
  const LabeledDataset clean = GenerateSequenceTask(task, 100, 4, {150});
  PoisonSpec spec;
  spec.trigger.tokens = {150};
  for (double rate : {0.05, 0.5}) {
    spec.poison_rate = rate;
    try {
      PoisonDataset(clean, spec, 3);
      FAIL() << "expected an exception for rate " << rate;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kRateOutOfRange);
    }
  }
}

TEST(SpuriousTest, NeverTheTriggerToken) {
  const TaskConfig task;
  const PoisonSpec spec = RandomPoisonSpec(task, 12);
  for (uint64_t seed = 0; seed < 2000; ++seed) {
    const Perturbation p = RandomSpuriousPerturbation(spec, task, seed);
    ASSERT_EQ(p.tokens.size(), 1u);
    EXPECT_NE(p.tokens[0], spec.trigger.tokens[0]);
    EXPECT_TRUE(task.IsNeutral(p.tokens[0]));
  }
}

TEST(SpuriousTest, GridPatternDiffersFromTrigger) {
  const TaskConfig task = GridTask();
  const PoisonSpec spec = RandomPoisonSpec(task, 4);
  for (uint64_t seed = 0; seed < 2000; ++seed) {
    const Perturbation p = RandomSpuriousPerturbation(spec, task, seed);
    int differing = 0;
    for (int i = 0; i < 9; ++i) differing += p.stencil[i] != spec.trigger.stencil[i];
    EXPECT_GE(differing, 1);
  }
}

TEST(SpuriousTest, TokenChoiceIsUniform) {
  const TaskConfig task;
  const PoisonSpec spec = RandomPoisonSpec(task, 12);
  const int draws = 10000;
  std::map<int32_t, int> counts;
  for (int i = 0; i < draws; ++i) ++counts[RandomSpuriousPerturbation(spec, task, i).tokens[0]];
  const int categories = task.num_neutral_tokens - 1;
  const double expected = double(draws) / categories;
  double chi2 = 0.0;
  for (int32_t t = task.first_neutral(); t < task.vocab_size(); ++t) {
    if (t == spec.trigger.tokens[0]) continue;
    const double c = counts.count(t) ? counts[t] : 0;
    chi2 += (c - expected) * (c - expected) / expected;
  }
  // The statistic has mean df and standard deviation sqrt(2 df).
  const int df = categories - 1;
  EXPECT_LT(std::abs(chi2 - df), 3.0 * std::sqrt(2.0 * df));
}

TEST(SpecTest, RandomSpecsAreValid) {
  for (const TaskConfig& task : {TaskConfig{}, GridTask()}) {
    for (uint64_t seed = 0; seed < 50; ++seed) {
      const PoisonSpec spec = RandomPoisonSpec(task, seed, seed % 2 == 0);
      EXPECT_NO_THROW(spec.Validate(task));
      EXPECT_GE(spec.poison_rate, kMinPoisonRate);
      EXPECT_LE(spec.poison_rate, kMaxPoisonRate);
    }
  }
}

TEST(EncodeTest, ShapesMatchModelConfig) {
  const TaskConfig seq;
  const transformer::ModelConfig sc = ModelConfigFor(seq, {});
  const auto in = Encode(GenerateSequenceTask(seq, 1, 1).samples[0], seq);
  EXPECT_EQ(int(in.tokens.size()), sc.content_slots());
  const TaskConfig grid = GridTask();
  const transformer::ModelConfig gc = ModelConfigFor(grid, {});
  const auto gin = Encode(GenerateGridTask(grid, 1, 1).samples[0], grid);
  EXPECT_EQ(gin.patches.rows(), gc.content_slots());
  EXPECT_EQ(gin.patches.cols(), gc.patch_dim);
}

TEST(DatasetIoTest, RoundTrip) {
  for (const TaskConfig& task : {TaskConfig{}, GridTask()}) {
    const LabeledDataset d = GenerateTask(task, 40, 6);
    std::stringstream s;
    WriteDataset(d, s);
    EXPECT_EQ(ReadDataset(s), d);
  }
}

}  // namespace
}  // namespace ahtd::datasets
