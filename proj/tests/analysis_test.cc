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

#include "ahtd/analysis.h"
#include "ahtd/error.h"
#include "test_util.h"

namespace ahtd::analysis {
namespace {

using transformer::TokenKind;

// Trace with `layers` x `heads` attention maps over n tokens: class token
// first, `content` content tokens, padding after.
AttentionTrace MakeTrace(int layers, int heads, int n, int content) {
  AttentionTrace t;
  t.tokens.assign(n, TokenKind::kPadding);
  t.tokens[0] = TokenKind::kClass;
  for (int i = 1; i <= content; ++i) t.tokens[i] = TokenKind::kContent;
  t.attention.assign(layers, std::vector<Matrix>(heads, Matrix::Zero(n, n)));
  return t;
}

// Random attention where each row peaks on `focus` with probability `p`.
void FillRandom(Matrix& a, int focus, double p, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::bernoulli_distribution peak(p);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = u(rng);
    if (peak(rng)) a(i, focus) += 2.0f;
    a.row(i) /= a.row(i).sum();
  }
}

// Straightforward restatement of the hijacking rule.
struct Oracle {
  static int Argmax(const Matrix& a, int row) {
    const float* begin = a.data() + row * a.cols();
    return int(std::max_element(begin, begin + a.cols()) - begin);
  }
  // Share of content rows of `a` whose argmax is content column k.
  static double Fraction(const AttentionTrace& t, const Matrix& a, int k) {
    if (t.tokens[k] != TokenKind::kContent) return 0.0;
    int rows = 0, hits = 0;
    for (int i = 0; i < int(t.tokens.size()); ++i) {
      if (t.tokens[i] != TokenKind::kContent) continue;
      ++rows;
      if (Argmax(a, i) == k) ++hits;
    }
    return rows ? double(hits) / rows : 0.0;
  }
  static bool Hijacking(const std::vector<AttentionTrace>& traces, int l, int h,
                        const HijackParams& p) {
    const int n = int(traces[0].tokens.size());
    if (p.mode == HijackMode::kPerSample) {
      int samples = 0;
      for (const AttentionTrace& t : traces) {
        bool any = false;
        for (int k = 0; k < n; ++k) any = any || Fraction(t, t.attention[l][h], k) > p.alpha;
        samples += any;
      }
      return samples > p.beta;
    }
    for (int k = 0; k < n; ++k) {
      int samples = 0;
      for (const AttentionTrace& t : traces) samples += Fraction(t, t.attention[l][h], k) > p.alpha;
      if (samples > p.beta) return true;
    }
    return false;
  }
};

TEST(HijackTest, MatchesBruteForceOnRandomTraces) {
  std::mt19937_64 rng(2024);
  int flagged = 0, total = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int layers = 1 + int(rng() % 3), heads = 1 + int(rng() % 3);
    const int n = 4 + int(rng() % 8);
    const int samples = 2 + int(rng() % 10);
    std::vector<AttentionTrace> traces;
    for (int s = 0; s < samples; ++s) {
      const int content = 1 + int(rng() % (n - 1));
      AttentionTrace t = MakeTrace(layers, heads, n, content);
      for (int l = 0; l < layers; ++l) {
        for (int h = 0; h < heads; ++h) {
          const int focus = (l + h) % 2 ? 1 + int(rng() % content) : int(rng() % n);
          FillRandom(t.attention[l][h], focus, (l * heads + h) % 3 / 2.0, rng);
        }
      }
      traces.push_back(std::move(t));
    }
    HijackParams p;
    p.alpha = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    p.beta = int(rng() % samples);
    p.mode = trial % 2 ? HijackMode::kConstantToken : HijackMode::kPerSample;
    const HijackReport r = DetectHijackingHeads(traces, p);
    ASSERT_EQ(int(r.heads.size()), layers * heads);
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < heads; ++h) {
        const bool expected = Oracle::Hijacking(traces, l, h, p);
        ASSERT_EQ(r.at(l, h).is_hijacking, expected) << "trial " << trial;
        flagged += expected;
        ++total;
      }
    }
  }
  // Both outcomes must be exercised for the comparison to mean anything.
  EXPECT_GT(flagged, total / 10);
  EXPECT_LT(flagged, total * 9 / 10);
}

TEST(HijackTest, FractionExamples) {
  const int n = 5;
  const std::vector<bool> active = {false, true, true, true, true};
  Matrix column = Matrix::Zero(n, n);
  column.col(2).setOnes();
  EXPECT_DOUBLE_EQ(HijackFraction(column, 2, active), 1.0);
  EXPECT_DOUBLE_EQ(HijackFraction(column, 3, active), 0.0);
  const Matrix diagonal = Matrix::Identity(n, n);
  for (int k = 1; k < n; ++k) EXPECT_DOUBLE_EQ(HijackFraction(diagonal, k, active), 0.25);
}

TEST(HijackTest, ClassAndPaddingAreNeverTargets) {
  AttentionTrace t = MakeTrace(1, 2, 6, 3);
  t.attention[0][0].col(0).setOnes();  // everything on the class token
  t.attention[0][1].col(5).setOnes();  // everything on padding
  const HijackReport r = DetectHijackingHeads({t, t}, {0.3, 1, HijackMode::kPerSample});
  EXPECT_EQ(r.Count(), 0);
}

class HookedModelTest : public ::testing::Test {
 protected:
  void SetUp() override {
    task_ = testing::SmallSequenceTask();
    model_ = transformer::ZeroModel(
        datasets::ModelConfigFor(task_, testing::SmallArchitecture()));
    for (const auto& s : datasets::GenerateTask(task_, 20, 8).samples) {
      dev_.push_back(datasets::Encode(s, task_));
    }
  }

  std::vector<AttentionTrace> Traces(const transformer::ForwardOptions& options) const {
    return transformer::Forward(model_, dev_, options);
  }

  datasets::TaskConfig task_;
  TransformerModel model_;
  std::vector<transformer::ModelInput> dev_;
};

TEST_F(HookedModelTest, OnlyTheFixedHeadIsFlagged) {
  transformer::ForwardOptions options;
  options.attention_hook = [](int layer, int head, Matrix& a) {
    if (layer != 1 || head != 0) return;
    a *= 0.3f;
    a.col(3).array() += 0.7f;
  };
  const HijackReport r = DetectHijackingHeads(Traces(options), {0.4, 5, HijackMode::kPerSample});
  EXPECT_EQ(r.Flagged(), (std::set<HeadIndex>{{1, 0}}));
  EXPECT_EQ(r.at(1, 0).token, 3);
  EXPECT_EQ(r.at(1, 0).qualifying_samples, 20);
  EXPECT_EQ(r.PerLayer(), (std::vector<int>{0, 1}));
}

TEST_F(HookedModelTest, UniformAttentionHasNoHijackingHeads) {
  for (HijackMode mode : {HijackMode::kPerSample, HijackMode::kConstantToken}) {
    EXPECT_EQ(DetectHijackingHeads(model_, dev_, {0.05, 0, mode}).Count(), 0);
  }
}

TEST_F(HookedModelTest, CountsAreMonotoneInAlphaAndBeta) {
  const auto model = transformer::RandomModel(model_.config, 4);
  const auto traces = transformer::Forward(model, dev_);
  for (int beta = 0; beta < 19; ++beta) {
    int previous = 1 << 30;
    for (double alpha = 0.05; alpha < 1.0; alpha += 0.05) {
      const int count = DetectHijackingHeads(traces, {alpha, beta, HijackMode::kPerSample}).Count();
      EXPECT_LE(count, previous);
      if (beta > 0) {
        EXPECT_LE(count,
                  DetectHijackingHeads(traces, {alpha, beta - 1, HijackMode::kPerSample}).Count());
      }
      previous = count;
    }
  }
}

TEST_F(HookedModelTest, InvalidParametersThrow) {
  const auto traces = Traces({});
  EXPECT_THROW(DetectHijackingHeads(traces, {0.0, 1, HijackMode::kPerSample}), Error);
  EXPECT_THROW(DetectHijackingHeads(traces, {1.0, 1, HijackMode::kPerSample}), Error);
  EXPECT_THROW(DetectHijackingHeads(traces, {0.3, 20, HijackMode::kPerSample}), Error);
  EXPECT_THROW(DetectHijackingHeads(std::vector<AttentionTrace>{}, {}), Error);
}

TEST(PopulationTest, CellsAverageOverModels) {
  auto report = [](std::vector<bool> flags) {
    HijackReport r;
    r.num_layers = int(flags.size());
    r.num_heads = 1;
    for (std::size_t l = 0; l < flags.size(); ++l) {
      HeadHijack h;
      h.head = {int(l), 0};
      h.is_hijacking = flags[l];
      r.heads.push_back(h);
    }
    return r;
  };
  using zoo::GroundTruth;
  const std::vector<HijackReport> reports = {report({true, true}), report({false, false}),
                                             report({false, true}), report({false, false})};
  const std::vector<GroundTruth> labels = {GroundTruth::kTrojan, GroundTruth::kTrojan,
                                           GroundTruth::kClean, GroundTruth::kClean};
  const PopulationStats stats = ComputePopulationStats(reports, labels);
  EXPECT_EQ(stats.trojan.models, 2);
  EXPECT_DOUBLE_EQ(stats.trojan.fraction_with_hijacking, 0.5);
  EXPECT_DOUBLE_EQ(stats.trojan.mean_head_count, 1.0);
  EXPECT_DOUBLE_EQ(stats.clean.fraction_with_hijacking, 0.5);
  EXPECT_DOUBLE_EQ(stats.clean.mean_head_count, 0.5);

  const std::vector<double> per_layer = PerLayerCounts(reports);
  EXPECT_EQ(per_layer, (std::vector<double>{0.25, 0.5}));
  for (double v : per_layer) EXPECT_LE(v, 1.0);

  EXPECT_THROW(ComputePopulationStats({}, {}), Error);
  EXPECT_THROW(ComputePopulationStats(reports, {GroundTruth::kClean}), Error);
  EXPECT_THROW(PerLayerCounts({report({true}), report({true, false})}), Error);
}

TEST(PopulationTest, LastLayerOnlyHijacking) {
  std::vector<HijackReport> reports;
  for (int m = 0; m < 3; ++m) {
    HijackReport r;
    r.num_layers = 3;
    r.num_heads = 2;
    for (int l = 0; l < 3; ++l) {
      for (int h = 0; h < 2; ++h) r.heads.push_back({{l, h}, l == 2 && h <= m % 2});
    }
    reports.push_back(r);
  }
  const std::vector<double> per_layer = PerLayerCounts(reports);
  EXPECT_DOUBLE_EQ(per_layer[0], 0.0);
  EXPECT_DOUBLE_EQ(per_layer[1], 0.0);
  EXPECT_NEAR(per_layer[2], 4.0 / 3.0, 1e-12);
}

std::vector<AttentionTrace> AllContent(const Matrix& a) {
  AttentionTrace t;
  t.tokens.assign(a.rows(), TokenKind::kContent);
  t.attention = {{a}};
  return {t};
}

TEST(DistanceTest, ClosedFormCases) {
  using transformer::Mode;
  EXPECT_FLOAT_EQ(AverageAttentionDistance(AllContent(Matrix::Identity(4, 4)), Mode::kSequence)(0, 0),
                  0.0f);
  EXPECT_FLOAT_EQ(
      AverageAttentionDistance(AllContent(Matrix::Constant(4, 4, 0.25f)), Mode::kSequence)(0, 0),
      1.25f);
  // Each row on its farthest token: 3, 2, 2, 3.
  Matrix far = Matrix::Zero(4, 4);
  far(0, 3) = far(1, 3) = far(2, 0) = far(3, 0) = 1.0f;
  EXPECT_FLOAT_EQ(AverageAttentionDistance(AllContent(far), Mode::kSequence)(0, 0), 2.5f);
  // Grid of 2x2 patches: the diagonal neighbour is sqrt(2) away.
  Matrix diag = Matrix::Zero(4, 4);
  diag(0, 3) = diag(3, 0) = diag(1, 2) = diag(2, 1) = 1.0f;
  EXPECT_NEAR(AverageAttentionDistance(AllContent(diag), Mode::kGrid)(0, 0), std::sqrt(2.0), 1e-6);
}

TEST(DistanceTest, DeepLayerMeanUsesTheDeeperHalf) {
  EXPECT_DOUBLE_EQ(DeepLayerMean(std::vector<double>{1, 2, 3, 4}), 3.5);
  EXPECT_DOUBLE_EQ(DeepLayerMean(std::vector<double>{1, 2, 3}), 2.5);
  Matrix m(2, 2);
  m << 1, 1, 3, 5;
  EXPECT_DOUBLE_EQ(DeepLayerMean(m), 4.0);
}

class ProfileTest : public HookedModelTest {
 protected:
  void SetUp() override {
    HookedModelTest::SetUp();
    model_ = transformer::RandomModel(model_.config, 12);
  }
};

TEST_F(ProfileTest, IdenticalInputsGiveIdenticalProfiles) {
  const DistanceProfile d = ComputeDistanceProfile(model_, dev_, dev_, dev_);
  EXPECT_TRUE(d.clean.isApprox(d.poisoned));
  EXPECT_TRUE(d.clean.isApprox(d.spurious));

  HijackReport none;
  const CkaProfile c = ComputeCkaProfile(model_, dev_, dev_, none);
  for (double v : c.before) EXPECT_NEAR(v, 1.0, 1e-4);
  EXPECT_EQ(c.before, c.after);
}

TEST_F(ProfileTest, DropWithoutHeadsIsZero) {
  const auto samples = datasets::GenerateTask(task_, 30, 3).samples;
  const FunctionalityDrop d = ComputeFunctionalityDrop(model_, task_, samples, samples, 0, {});
  EXPECT_TRUE(d.no_hijacking_heads);
  EXPECT_EQ(d.delta_clean_accuracy, 0.0);
  EXPECT_EQ(d.delta_asr, 0.0);
}

TEST(AnalysisSetsTest, MatchedAndNonTarget) {
  const datasets::TaskConfig task = testing::SmallSequenceTask();
  const datasets::PoisonSpec spec = datasets::RandomPoisonSpec(task, 5);
  const AnalysisSets sets = MakeAnalysisSets(task, spec, 25, 9);
  ASSERT_EQ(sets.clean.size(), 25u);
  ASSERT_EQ(sets.poisoned.size(), 25u);
  ASSERT_EQ(sets.spurious.size(), 25u);
  for (std::size_t i = 0; i < sets.clean.size(); ++i) {
    EXPECT_NE(sets.clean[i].label, spec.target_class);
    EXPECT_FALSE(datasets::ContainsPerturbation(sets.clean[i], spec.trigger, task));
    EXPECT_TRUE(datasets::ContainsPerturbation(sets.poisoned[i], spec.trigger, task));
    EXPECT_FALSE(datasets::ContainsPerturbation(sets.spurious[i], spec.trigger, task));
  }
  EXPECT_EQ(&sets.Dev(zoo::GroundTruth::kTrojan), &sets.poisoned);
  EXPECT_EQ(&sets.Dev(zoo::GroundTruth::kClean), &sets.spurious);
}

TEST(JsonTest, ReportCarriesEveryHead) {
  AttentionTrace t = MakeTrace(2, 3, 5, 4);
  for (auto& layer : t.attention) {
    for (Matrix& a : layer) a.setConstant(0.2f);
  }
  const Json j = ToJson(DetectHijackingHeads({t, t}, {0.3, 1, HijackMode::kPerSample}));
  EXPECT_EQ(j["heads"].size(), 6u);
}

}  // namespace
}  // namespace ahtd::analysis
