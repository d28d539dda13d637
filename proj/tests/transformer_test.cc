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
#include <random>
#include <sstream>

#include "ahtd/datasets.h"
#include "ahtd/error.h"
#include "ahtd/transformer.h"
#include "test_util.h"

namespace ahtd::transformer {
namespace {

using testing::RandomInput;
using testing::TinyConfig;

std::vector<ModelInput> RandomBatch(const ModelConfig& c, int count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(1, c.content_slots());
  std::vector<ModelInput> batch;
  for (int i = 0; i < count; ++i) batch.push_back(RandomInput(c, rng, len(rng)));
  return batch;
}

TEST(ForwardTest, AttentionRowsSumToOne) {
  const ModelConfig c = TinyConfig(3, 2, 8, 9);
  const TransformerModel m = RandomModel(c, 5);
  for (const AttentionTrace& t : Forward(m, RandomBatch(c, 20, 1))) {
    ASSERT_EQ(t.attention.size(), 3u);
    for (const auto& layer : t.attention) {
      for (const Matrix& a : layer) {
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          ASSERT_NEAR(a.row(r).sum(), 1.0f, 1e-5);
        }
      }
    }
  }
}

TEST(ForwardTest, ZeroModelAttendsUniformly) {
  const ModelConfig c = TinyConfig(2, 2, 8, 6);
  const TransformerModel m = ZeroModel(c);
  std::mt19937_64 rng(2);
  const AttentionTrace t = Forward(m, RandomInput(c, rng, c.content_slots()));
  for (const auto& layer : t.attention) {
    for (const Matrix& a : layer) {
      EXPECT_TRUE(a.isApproxToConstant(1.0f / c.max_tokens, 1e-6f));
    }
  }
}

TEST(ForwardTest, PaddingReceivesNoAttention) {
  const ModelConfig c = TinyConfig(2, 2, 8, 8);
  const TransformerModel m = RandomModel(c, 9);
  std::mt19937_64 rng(4);
  const int length = 3;
  const AttentionTrace t = Forward(m, RandomInput(c, rng, length));
  for (int j = 1 + length; j < c.max_tokens; ++j) {
    EXPECT_EQ(t.tokens[j], TokenKind::kPadding);
    for (const auto& layer : t.attention) {
      for (const Matrix& a : layer) EXPECT_LT(a.col(j).maxCoeff(), 1e-20f);
    }
  }
}

// Straight-line evaluation of one pre-LN encoder layer and the class-token
// readout, written independently of the library kernels.
std::vector<double> ReferenceLogits(const TransformerModel& m, const ModelInput& in) {
  const ModelConfig& c = m.config;
  const Parameters& p = m.params;
  const int n = c.max_tokens, d = c.hidden_dim;
  auto layer_norm = [&](const std::vector<double>& v, const Matrix& g, const Matrix& b) {
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= v.size();
    for (double x : v) var += (x - mean) * (x - mean);
    var /= v.size();
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] = (v[i] - mean) / std::sqrt(var + 1e-5) * g(0, i) + b(0, i);
    }
    return out;
  };
  auto gelu = [](double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  };
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (int k = 0; k < d; ++k) {
    x[0][k] = p.class_token(0, k) + p.position(0, k);
    for (int i = 1; i < n; ++i) {
      x[i][k] = p.token_embedding(in.tokens[i - 1], k) + p.position(i, k);
    }
  }
  for (const auto& lp : p.layers) {
    std::vector<std::vector<double>> h(n), q(n, std::vector<double>(d)),
        kk(n, std::vector<double>(d)), v(n, std::vector<double>(d));
    for (int i = 0; i < n; ++i) {
      h[i] = layer_norm(x[i], lp.ln1_gain, lp.ln1_bias);
      for (int o = 0; o < d; ++o) {
        q[i][o] = lp.bq(0, o);
        kk[i][o] = lp.bk(0, o);
        v[i][o] = lp.bv(0, o);
        for (int k = 0; k < d; ++k) {
          q[i][o] += h[i][k] * lp.wq(k, o);
          kk[i][o] += h[i][k] * lp.wk(k, o);
          v[i][o] += h[i][k] * lp.wv(k, o);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300, z = 0.0;
      for (int j = 0; j < n; ++j) {
        s[j] = 0.0;
        for (int k = 0; k < d; ++k) s[j] += q[i][k] * kk[j][k];
        s[j] /= std::sqrt(double(d));
        mx = std::max(mx, s[j]);
      }
      for (int j = 0; j < n; ++j) z += std::exp(s[j] - mx);
      std::vector<double> ctx(d, 0.0);
      for (int j = 0; j < n; ++j) {
        const double a = std::exp(s[j] - mx) / z;
        for (int k = 0; k < d; ++k) ctx[k] += a * v[j][k];
      }
      for (int o = 0; o < d; ++o) {
        for (int k = 0; k < d; ++k) x[i][o] += ctx[k] * lp.wo(k, o);
      }
    }
    for (int i = 0; i < n; ++i) {
      const std::vector<double> h2 = layer_norm(x[i], lp.ln2_gain, lp.ln2_bias);
      std::vector<double> act(c.ffn_dim);
      for (int f = 0; f < c.ffn_dim; ++f) {
        double pre = lp.b1(0, f);
        for (int k = 0; k < d; ++k) pre += h2[k] * lp.w1(k, f);
        act[f] = gelu(pre);
      }
      for (int o = 0; o < d; ++o) {
        double y = lp.b2(0, o);
        for (int f = 0; f < c.ffn_dim; ++f) y += act[f] * lp.w2(f, o);
        x[i][o] += y;
      }
    }
  }
  const std::vector<double> z = layer_norm(x[0], p.final_ln_gain, p.final_ln_bias);
  std::vector<double> logits(c.num_classes);
  for (int o = 0; o < c.num_classes; ++o) {
    logits[o] = p.head_bias(0, o);
    for (int k = 0; k < d; ++k) logits[o] += z[k] * p.head_weight(k, o);
  }
  return logits;
}

TEST(ForwardTest, MatchesStraightLineReference) {
  ModelConfig c = TinyConfig(1, 1, 4, 3);
  TransformerModel m = RandomModel(c, 21);
  // Non-trivial layer-norm parameters so that every term is exercised.
  std::mt19937_64 rng(8);
  std::normal_distribution<float> g(0.0f, 0.3f);
  for (auto& [name, t] : m.params.Tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] += g(rng);
  }
  ModelInput in;
  in.tokens = {3, 7};
  const std::vector<double> expected = ReferenceLogits(m, in);
  const RowVector got = Logits(m, in);
  ASSERT_EQ(got.size(), c.num_classes);
  for (int o = 0; o < c.num_classes; ++o) EXPECT_NEAR(got(o), expected[o], 1e-4);
}

TEST(ForwardTest, BatchMatchesSingle) {
  const ModelConfig c = TinyConfig();
  const TransformerModel m = RandomModel(c, 3);
  const auto batch = RandomBatch(c, 5, 6);
  const auto traces = Forward(m, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_TRUE(traces[i].logits.isApprox(Logits(m, batch[i])));
    EXPECT_EQ(Predict(m, batch[i]), [&] {
      Eigen::Index arg;
      traces[i].logits.maxCoeff(&arg);
      return int(arg);
    }());
  }
}

TEST(ForwardTest, MalformedInputThrows) {
  const ModelConfig c = TinyConfig();
  const TransformerModel m = RandomModel(c, 3);
  ModelInput bad;
  bad.tokens = {1, 2};
  try {
    Forward(m, bad);
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

std::vector<TrainingExample> SeparableToyTask(const ModelConfig& c, int count, uint64_t seed) {
  // Class 0 sequences contain token 1, class 1 sequences contain token 2; all
  // other tokens are shared noise.
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(3, c.vocab_size - 1);
  std::uniform_int_distribution<int> pos(0, c.content_slots() - 1);
  std::vector<TrainingExample> out;
  for (int i = 0; i < count; ++i) {
    TrainingExample ex;
    ex.label = i % 2;
    ex.input.tokens.resize(c.content_slots());
    for (auto& t : ex.input.tokens) t = noise(rng);
    ex.input.tokens[pos(rng)] = 1 + ex.label;
    out.push_back(std::move(ex));
  }
  return out;
}

TEST(TrainTest, LearnsSeparableToyTask) {
  ModelConfig c = TinyConfig(2, 2, 16, 8);
  c.num_classes = 2;
  const auto data = SeparableToyTask(c, 400, 1);
  TrainHyper hyper;
  hyper.epochs = 20;
  hyper.seed = 3;
  const TrainResult r = Train(c, data, hyper);
  EXPECT_GE(r.training_accuracy, 0.99);
  int correct = 0;
  for (const auto& ex : data) correct += Predict(r.model, ex.input) == ex.label ? 1 : 0;
  EXPECT_GE(double(correct) / data.size(), 0.99);
}

TEST(TrainTest, SameSeedSameParameters) {
  ModelConfig c = TinyConfig(2, 2, 8, 6);
  c.num_classes = 2;
  const auto data = SeparableToyTask(c, 64, 2);
  TrainHyper hyper;
  hyper.epochs = 2;
  hyper.seed = 11;
  const TrainResult a = Train(c, data, hyper);
  const TrainResult b = Train(c, data, hyper);
  const auto ta = a.model.params.Tensors();
  const auto tb = b.model.params.Tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(*ta[i].second, *tb[i].second) << ta[i].first;
  }
}

TEST(GradientCheckTest, RandomTinyModel) {
  const ModelConfig c = TinyConfig(2, 2, 8, 6);
  const TransformerModel m = RandomModel(c, 17);
  std::mt19937_64 rng(5);
  TrainingExample ex{RandomInput(c, rng, 4), 1};
  ASSERT_LT(m.params.ParameterCount(), 10000u);
  const GradientCheckResult r = GradientCheck(m, ex, 256, 1);
  EXPECT_GT(r.checked, 100);
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(GradientCheckTest, GridModeModel) {
  ModelConfig c = TinyConfig(1, 2, 8, 5);
  c.mode = Mode::kGrid;
  c.vocab_size = 0;
  c.patch_dim = 4;
  const TransformerModel m = RandomModel(c, 2);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  TrainingExample ex;
  ex.input.patches = Matrix(c.content_slots(), c.patch_dim);
  for (Eigen::Index i = 0; i < ex.input.patches.size(); ++i) ex.input.patches.data()[i] = g(rng);
  ex.label = 2;
  EXPECT_LT(GradientCheck(m, ex, 200, 4).max_relative_error, 1e-3);
}

TEST(GradientCheckTest, SaturatedSampleIsSkipped) {
  const ModelConfig c = TinyConfig(1, 1, 4, 4);
  TransformerModel m = ZeroModel(c);
  m.params.head_bias(0, 0) = 100.0f;
  std::mt19937_64 rng(1);
  const TrainingExample ex{RandomInput(c, rng, 3), 0};
  const GradientCheckResult r = GradientCheck(m, ex, 64, 2);
  EXPECT_EQ(r.checked, 0);
  EXPECT_EQ(r.skipped, 64);
  EXPECT_EQ(r.max_relative_error, 0.0);
}

TEST(GradientCheckTest, CorruptedBackwardIsCaught) {
  const ModelConfig c = TinyConfig(2, 2, 8, 6);
  const TransformerModel m = RandomModel(c, 17);
  std::mt19937_64 rng(5);
  const TrainingExample ex{RandomInput(c, rng, 4), 1};
  auto corrupted = [](const ParametersT<double>& p, const ModelConfig& config,
                      const TrainingExample& e) {
    LossAndGradient lg = ComputeGradient(p, config, e);
    for (auto& [name, t] : lg.gradient.Tensors()) *t *= 2.0;
    return lg;
  };
  EXPECT_GT(GradientCheck(m, ex, 64, 1, corrupted).max_relative_error, 1e-1);
}

TEST(DeactivateTest, EmptySetIsIdentity) {
  const TransformerModel m = RandomModel(TinyConfig(), 4);
  const TransformerModel d = DeactivateHeads(m, {});
  const auto a = m.params.Tensors();
  const auto b = d.params.Tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
}

TEST(DeactivateTest, Composition) {
  const ModelConfig c = TinyConfig(3, 2, 8, 6);
  const TransformerModel m = RandomModel(c, 4);
  const HeadIndex a{0, 1}, b{2, 0};
  const TransformerModel both = DeactivateHeads(m, {a, b});
  const TransformerModel chained = DeactivateHeads(DeactivateHeads(m, {a}), {b});
  const TransformerModel reversed = DeactivateHeads(DeactivateHeads(m, {b}), {a});
  for (const ModelInput& in : RandomBatch(c, 10, 3)) {
    const RowVector l = Logits(both, in);
    EXPECT_EQ(l, Logits(chained, in));
    EXPECT_EQ(l, Logits(reversed, in));
  }
  EXPECT_EQ(both.deactivated_heads, (std::set<HeadIndex>{a, b}));
}

TEST(DeactivateTest, WholeLayerEqualsAttentionBypass) {
  const ModelConfig c = TinyConfig(3, 2, 8, 6);
  const TransformerModel m = RandomModel(c, 14);
  const TransformerModel off = DeactivateHeads(m, {{1, 0}, {1, 1}});
  ForwardOptions bypass;
  bypass.bypass_attention = {false, true, false};
  for (const ModelInput& in : RandomBatch(c, 10, 8)) {
    const AttentionTrace a = Forward(off, in);
    const AttentionTrace b = Forward(m, in, bypass);
    EXPECT_TRUE(a.logits.isApprox(b.logits, 1e-6f));
    for (int l = 0; l < c.num_layers; ++l) {
      EXPECT_TRUE(a.hidden[l].isApprox(b.hidden[l], 1e-6f)) << "layer " << l;
    }
  }
}

TEST(DeactivateTest, DeactivatedHeadIsUniform) {
  const ModelConfig c = TinyConfig(2, 2, 8, 6);
  const TransformerModel off = DeactivateHeads(RandomModel(c, 2), {{0, 1}});
  std::mt19937_64 rng(3);
  const AttentionTrace t = Forward(off, RandomInput(c, rng, c.content_slots()));
  EXPECT_TRUE(t.attention[0][1].isApproxToConstant(1.0f / c.max_tokens, 1e-6f));
}

TEST(DeactivateTest, OutOfRangeThrows) {
  const TransformerModel m = RandomModel(TinyConfig(2, 2), 1);
  for (HeadIndex h : {HeadIndex{2, 0}, HeadIndex{0, 2}, HeadIndex{-1, 0}}) {
    try {
      DeactivateHeads(m, {h});
      FAIL() << "expected an exception";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kIndexOutOfRange);
    }
  }
}

TEST(ModelIoTest, RoundTripIsExact) {
  const ModelConfig c = TinyConfig();
  TransformerModel m = DeactivateHeads(RandomModel(c, 33), {{1, 1}});
  m.train_seed = 99;
  m.dataset_fingerprint = "abc123";
  std::stringstream s;
  WriteModel(m, s);
  const TransformerModel r = ReadModel(s);
  EXPECT_EQ(r.config, m.config);
  EXPECT_EQ(r.deactivated_heads, m.deactivated_heads);
  EXPECT_EQ(r.train_seed, 99u);
  EXPECT_EQ(r.dataset_fingerprint, "abc123");
  const auto a = m.params.Tensors();
  const auto b = r.params.Tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
}

TEST(ModelIoTest, TruncatedFileThrows) {
  std::stringstream s;
  WriteModel(RandomModel(TinyConfig(), 1), s);
  std::string text = s.str();
  text.resize(text.size() / 2);
  std::stringstream truncated(text);
  EXPECT_THROW(ReadModel(truncated), Error);
}

}  // namespace
}  // namespace ahtd::transformer
