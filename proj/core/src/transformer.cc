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

#include "ahtd/transformer.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <type_traits>

#include "ahtd/error.h"

namespace ahtd::transformer {
namespace {

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLayerNormEps = 1e-5;

void CheckInput(const ModelConfig& config, const ModelInput& input) {
  const int slots = config.content_slots();
  if (config.mode == Mode::kSequence) {
    if (static_cast<int>(input.tokens.size()) != slots) {
      throw Error(ErrorCode::kShapeMismatch,
                  "expected " + std::to_string(slots) + " tokens, got " +
                      std::to_string(input.tokens.size()));
    }
    for (int32_t t : input.tokens) {
      if (t < 0 || t >= config.vocab_size) {
        throw Error(ErrorCode::kShapeMismatch,
                    "token id " + std::to_string(t) + " outside vocabulary");
      }
    }
  } else {
    if (input.patches.rows() != slots ||
        input.patches.cols() != config.patch_dim) {
      throw Error(ErrorCode::kShapeMismatch,
                  "expected " + std::to_string(slots) + "x" +
                      std::to_string(config.patch_dim) + " patches");
    }
    if (!input.patches.allFinite()) {
      throw Error(ErrorCode::kShapeMismatch, "non-finite patch values");
    }
  }
}

std::vector<TokenKind> TokenKinds(const ModelConfig& config,
                                  const ModelInput& input) {
  std::vector<TokenKind> kinds;
  kinds.reserve(config.max_tokens);
  if (config.use_class_token) kinds.push_back(TokenKind::kClass);
  for (int s = 0; s < config.content_slots(); ++s) {
    const bool pad =
        config.mode == Mode::kSequence && input.tokens[s] == kPadToken;
    kinds.push_back(pad ? TokenKind::kPadding : TokenKind::kContent);
  }
  return kinds;
}

template <typename T>
T Gelu(T x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  const T inner = kC * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T GeluGrad(T x) {
  constexpr T kC = T(0.7978845608028654);
  const T x2 = x * x;
  const T inner = kC * (x + T(0.044715) * x2 * x);
  const T th = std::tanh(inner);
  const T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) +
         T(0.5) * x * sech2 * kC * (T(1) + T(3 * 0.044715) * x2);
}

// Row-wise layer norm. Stores the normalized rows and inverse std devs.
template <typename T>
void LayerNorm(const MatrixT<T>& x, const MatrixT<T>& gain,
               const MatrixT<T>& bias, MatrixT<T>& xhat, ColVec<T>& rstd,
               MatrixT<T>& y) {
  const auto d = x.cols();
  xhat.resize(x.rows(), d);
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const T var = centered.square().mean();
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd(r) = inv;
    xhat.row(r) = centered * inv;
  }
  y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() +
      bias.row(0).array();
}

template <typename T>
MatrixT<T> LayerNormBackward(const MatrixT<T>& dy, const MatrixT<T>& xhat,
                             const ColVec<T>& rstd, const MatrixT<T>& gain,
                             MatrixT<T>& dgain, MatrixT<T>& dbias) {
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const MatrixT<T> dxhat = dy.array().rowwise() * gain.row(0).array();
  const T inv_d = T(1) / T(dy.cols());
  MatrixT<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dxhat = dxhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_dxhat -
                           xhat.row(r).array() * mean_dxhat_xhat)
                              .matrix();
  }
  return dx;
}

template <typename T>
struct LayerCache {
  MatrixT<T> x_in, xhat1, xn1, q, k, v, ctx, x_mid, xhat2, xn2, pre, act;
  ColVec<T> rstd1, rstd2;
  std::vector<MatrixT<T>> attn;
  bool bypassed = false;
};

template <typename T>
struct Cache {
  std::vector<LayerCache<T>> layers;
  MatrixT<T> x_out;          // output of the last layer
  MatrixT<T> zhat, z;        // 1 x d, readout row after final layer norm
  ColVec<T> rstd_f;
  MatrixT<T> logits;         // 1 x C
  std::vector<TokenKind> kinds;
};

template <typename T>
MatrixT<T> Embed(const ParametersT<T>& p, const ModelConfig& config,
                 const ModelInput& input) {
  const int n = config.max_tokens;
  const int d = config.hidden_dim;
  MatrixT<T> x(n, d);
  int row = 0;
  if (config.use_class_token) x.row(row++) = p.class_token.row(0);
  if (config.mode == Mode::kSequence) {
    for (int32_t t : input.tokens) x.row(row++) = p.token_embedding.row(t);
  } else {
    const MatrixT<T> patches = input.patches.template cast<T>();
    x.bottomRows(patches.rows()) =
        (patches * p.patch_weight).rowwise() + p.patch_bias.row(0);
  }
  x += p.position;
  return x;
}

template <typename T>
void ForwardCached(const ParametersT<T>& p, const ModelConfig& config,
                   const ModelInput& input, const ForwardOptions* options,
                   Cache<T>& cache) {
  const int n = config.max_tokens;
  const int dk = config.head_dim();
  const T scale = T(1) / std::sqrt(T(dk));
  cache.kinds = TokenKinds(config, input);

  std::vector<int> padded_keys;
  for (int j = 0; j < n; ++j) {
    if (cache.kinds[j] == TokenKind::kPadding) padded_keys.push_back(j);
  }

  MatrixT<T> x = Embed(p, config, input);
  cache.layers.resize(config.num_layers);
  for (int l = 0; l < config.num_layers; ++l) {
    const LayerParamsT<T>& lp = p.layers[l];
    LayerCache<T>& c = cache.layers[l];
    c.x_in = x;
    c.bypassed = options != nullptr && l < int(options->bypass_attention.size()) &&
                 options->bypass_attention[l];
    if (c.bypassed) {
      c.x_mid = c.x_in;
      c.attn.clear();
    } else {
      LayerNorm(c.x_in, lp.ln1_gain, lp.ln1_bias, c.xhat1, c.rstd1, c.xn1);
      c.q = (c.xn1 * lp.wq).rowwise() + lp.bq.row(0);
      c.k = (c.xn1 * lp.wk).rowwise() + lp.bk.row(0);
      c.v = (c.xn1 * lp.wv).rowwise() + lp.bv.row(0);
      c.ctx.resize(n, config.hidden_dim);
      c.attn.resize(config.num_heads);
      for (int h = 0; h < config.num_heads; ++h) {
        MatrixT<T>& a = c.attn[h];
        a.noalias() = c.q.middleCols(h * dk, dk) *
                      c.k.middleCols(h * dk, dk).transpose();
        a *= scale;
        for (int j : padded_keys) a.col(j).setConstant(T(-1e30));
        numerics::SoftmaxRowsInPlace(a);
        if constexpr (std::is_same_v<T, float>) {
          if (options != nullptr && options->attention_hook) {
            options->attention_hook(l, h, a);
          }
        }
        c.ctx.middleCols(h * dk, dk).noalias() = a * c.v.middleCols(h * dk, dk);
      }
      c.x_mid = c.x_in;
      c.x_mid.noalias() += c.ctx * lp.wo;
    }
    LayerNorm(c.x_mid, lp.ln2_gain, lp.ln2_bias, c.xhat2, c.rstd2, c.xn2);
    c.pre = (c.xn2 * lp.w1).rowwise() + lp.b1.row(0);
    c.act = c.pre.unaryExpr([](T v) { return Gelu(v); });
    x = c.x_mid;
    x.noalias() += c.act * lp.w2;
    x.rowwise() += lp.b2.row(0);
  }
  cache.x_out = x;
  const MatrixT<T> readout = x.row(0);
  LayerNorm(readout, p.final_ln_gain, p.final_ln_bias, cache.zhat,
            cache.rstd_f, cache.z);
  cache.logits = cache.z * p.head_weight + p.head_bias;
}

template <typename T>
T CrossEntropy(const MatrixT<T>& logits, int label, MatrixT<T>* dlogits) {
  const T mx = logits.maxCoeff();
  MatrixT<T> e = (logits.array() - mx).exp();
  const T sum = e.sum();
  const T loss = std::log(sum) - (logits(0, label) - mx);
  if (dlogits != nullptr) {
    *dlogits = e / sum;
    (*dlogits)(0, label) -= T(1);
  }
  return loss;
}

// Accumulates d(loss)/d(params) into `g`.
template <typename T>
void Backward(const ParametersT<T>& p, const ModelConfig& config,
              const ModelInput& input, const Cache<T>& cache,
              const MatrixT<T>& dlogits, ParametersT<T>& g) {
  const int n = config.max_tokens;
  const int d = config.hidden_dim;
  const int dk = config.head_dim();
  const T scale = T(1) / std::sqrt(T(dk));

  g.head_weight.noalias() += cache.z.transpose() * dlogits;
  g.head_bias += dlogits;
  const MatrixT<T> dz = dlogits * p.head_weight.transpose();
  MatrixT<T> dx = MatrixT<T>::Zero(n, d);
  dx.row(0) = LayerNormBackward<T>(dz, cache.zhat, cache.rstd_f,
                                   p.final_ln_gain, g.final_ln_gain,
                                   g.final_ln_bias);

  for (int l = config.num_layers - 1; l >= 0; --l) {
    const LayerParamsT<T>& lp = p.layers[l];
    LayerParamsT<T>& lg = g.layers[l];
    const LayerCache<T>& c = cache.layers[l];

    // Feed-forward block.
    lg.w2.noalias() += c.act.transpose() * dx;
    lg.b2.row(0) += dx.colwise().sum();
    MatrixT<T> dpre = dx * lp.w2.transpose();
    for (Eigen::Index i = 0; i < dpre.size(); ++i) {
      dpre.data()[i] *= GeluGrad(c.pre.data()[i]);
    }
    lg.w1.noalias() += c.xn2.transpose() * dpre;
    lg.b1.row(0) += dpre.colwise().sum();
    const MatrixT<T> dxn2 = dpre * lp.w1.transpose();
    MatrixT<T> dmid = dx + LayerNormBackward<T>(dxn2, c.xhat2, c.rstd2,
                                                lp.ln2_gain, lg.ln2_gain,
                                                lg.ln2_bias);
    if (c.bypassed) {
      dx = dmid;
      continue;
    }

    // Attention block.
    lg.wo.noalias() += c.ctx.transpose() * dmid;
    const MatrixT<T> dctx = dmid * lp.wo.transpose();
    MatrixT<T> dq(n, d), dk_all(n, d), dv(n, d);
    for (int h = 0; h < config.num_heads; ++h) {
      const MatrixT<T>& a = c.attn[h];
      const auto dctx_h = dctx.middleCols(h * dk, dk);
      MatrixT<T> da = dctx_h * c.v.middleCols(h * dk, dk).transpose();
      dv.middleCols(h * dk, dk).noalias() = a.transpose() * dctx_h;
      const ColVec<T> row_dot = (da.array() * a.array()).rowwise().sum();
      MatrixT<T> ds = (a.array() * (da.array().colwise() - row_dot.array()));
      ds *= scale;
      dq.middleCols(h * dk, dk).noalias() = ds * c.k.middleCols(h * dk, dk);
      dk_all.middleCols(h * dk, dk).noalias() =
          ds.transpose() * c.q.middleCols(h * dk, dk);
    }
    lg.wq.noalias() += c.xn1.transpose() * dq;
    lg.wk.noalias() += c.xn1.transpose() * dk_all;
    lg.wv.noalias() += c.xn1.transpose() * dv;
    lg.bq.row(0) += dq.colwise().sum();
    lg.bk.row(0) += dk_all.colwise().sum();
    lg.bv.row(0) += dv.colwise().sum();
    MatrixT<T> dxn1 = dq * lp.wq.transpose();
    dxn1.noalias() += dk_all * lp.wk.transpose();
    dxn1.noalias() += dv * lp.wv.transpose();
    dx = dmid + LayerNormBackward<T>(dxn1, c.xhat1, c.rstd1, lp.ln1_gain,
                                     lg.ln1_gain, lg.ln1_bias);
  }

  // Embeddings.
  g.position += dx;
  int row = 0;
  if (config.use_class_token) g.class_token.row(0) += dx.row(row++);
  if (config.mode == Mode::kSequence) {
    for (int32_t t : input.tokens) g.token_embedding.row(t) += dx.row(row++);
  } else {
    const MatrixT<T> patches = input.patches.template cast<T>();
    const auto dpatch = dx.bottomRows(patches.rows());
    g.patch_weight.noalias() += patches.transpose() * dpatch;
    g.patch_bias.row(0) += dpatch.colwise().sum();
  }
}

template <typename T>
void ForEachPair(ParametersT<T>& a, const ParametersT<T>& b,
                 const std::function<void(MatrixT<T>&, const MatrixT<T>&)>& fn) {
  auto ta = a.Tensors();
  auto tb = b.Tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) fn(*ta[i].second, *tb[i].second);
}

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string_view ModeName(Mode mode) {
  return mode == Mode::kSequence ? "sequence" : "grid";
}

Mode ParseMode(std::string_view name) {
  if (name == "sequence") return Mode::kSequence;
  if (name == "grid") return Mode::kGrid;
  throw Error(ErrorCode::kInvalidArgument,
              "unknown mode '" + std::string(name) + "'");
}

void ModelConfig::Validate() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidArgument, "model config: " + what);
  };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (num_heads < 1) fail("num_heads must be >= 1");
  if (hidden_dim < 1 || hidden_dim % num_heads != 0) {
    fail("hidden_dim must be a positive multiple of num_heads");
  }
  if (ffn_dim < 1) fail("ffn_dim must be >= 1");
  if (max_tokens < 2) fail("max_tokens must be >= 2");
  if (content_slots() < 1) fail("no content slots");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (mode == Mode::kSequence && vocab_size < 2) fail("vocab_size must be >= 2");
  if (mode == Mode::kGrid && patch_dim < 1) fail("patch_dim must be >= 1");
}

template <typename T>
std::vector<std::pair<std::string, MatrixT<T>*>> ParametersT<T>::Tensors() {
  std::vector<std::pair<std::string, MatrixT<T>*>> out;
  auto add = [&out](std::string name, MatrixT<T>& m) {
    if (m.size() > 0) out.emplace_back(std::move(name), &m);
  };
  add("token_embedding", token_embedding);
  add("patch_weight", patch_weight);
  add("patch_bias", patch_bias);
  add("class_token", class_token);
  add("position", position);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerParamsT<T>& lp = layers[l];
    add(pre + "ln1_gain", lp.ln1_gain);
    add(pre + "ln1_bias", lp.ln1_bias);
    add(pre + "wq", lp.wq);
    add(pre + "wk", lp.wk);
    add(pre + "wv", lp.wv);
    add(pre + "bq", lp.bq);
    add(pre + "bk", lp.bk);
    add(pre + "bv", lp.bv);
    add(pre + "wo", lp.wo);
    add(pre + "ln2_gain", lp.ln2_gain);
    add(pre + "ln2_bias", lp.ln2_bias);
    add(pre + "w1", lp.w1);
    add(pre + "b1", lp.b1);
    add(pre + "w2", lp.w2);
    add(pre + "b2", lp.b2);
  }
  add("final_ln_gain", final_ln_gain);
  add("final_ln_bias", final_ln_bias);
  add("head_weight", head_weight);
  add("head_bias", head_bias);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const MatrixT<T>*>> ParametersT<T>::Tensors()
    const {
  auto mutable_views = const_cast<ParametersT<T>*>(this)->Tensors();
  std::vector<std::pair<std::string, const MatrixT<T>*>> out;
  out.reserve(mutable_views.size());
  for (auto& [name, m] : mutable_views) out.emplace_back(name, m);
  return out;
}

template <typename T>
ParametersT<T> ParametersT<T>::ZerosLike(const ParametersT& like) {
  ParametersT out = like;
  for (auto& [name, m] : out.Tensors()) m->setZero();
  return out;
}

template <typename T>
template <typename U>
ParametersT<U> ParametersT<T>::Cast() const {
  ParametersT<U> out;
  out.layers.resize(layers.size());
  auto copy_into = [&](ParametersT<U>& dst) {
    auto assign = [](MatrixT<U>& d, const MatrixT<T>& s) {
      d = s.template cast<U>();
    };
    assign(dst.token_embedding, token_embedding);
    assign(dst.patch_weight, patch_weight);
    assign(dst.patch_bias, patch_bias);
    assign(dst.class_token, class_token);
    assign(dst.position, position);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& s = layers[l];
      auto& d = dst.layers[l];
      assign(d.ln1_gain, s.ln1_gain);
      assign(d.ln1_bias, s.ln1_bias);
      assign(d.wq, s.wq);
      assign(d.wk, s.wk);
      assign(d.wv, s.wv);
      assign(d.bq, s.bq);
      assign(d.bk, s.bk);
      assign(d.bv, s.bv);
      assign(d.wo, s.wo);
      assign(d.ln2_gain, s.ln2_gain);
      assign(d.ln2_bias, s.ln2_bias);
      assign(d.w1, s.w1);
      assign(d.b1, s.b1);
      assign(d.w2, s.w2);
      assign(d.b2, s.b2);
    }
    assign(dst.final_ln_gain, final_ln_gain);
    assign(dst.final_ln_bias, final_ln_bias);
    assign(dst.head_weight, head_weight);
    assign(dst.head_bias, head_bias);
  };
  copy_into(out);
  return out;
}

template <typename T>
std::size_t ParametersT<T>::ParameterCount() const {
  std::size_t count = 0;
  for (const auto& [name, m] : Tensors()) count += m->size();
  return count;
}

template struct ParametersT<float>;
template struct ParametersT<double>;
template ParametersT<double> ParametersT<float>::Cast<double>() const;
template ParametersT<float> ParametersT<double>::Cast<float>() const;

namespace {

Parameters AllocateParameters(const ModelConfig& config) {
  const int d = config.hidden_dim;
  const int f = config.ffn_dim;
  Parameters p;
  if (config.mode == Mode::kSequence) {
    p.token_embedding = Matrix::Zero(config.vocab_size, d);
  } else {
    p.patch_weight = Matrix::Zero(config.patch_dim, d);
    p.patch_bias = Matrix::Zero(1, d);
  }
  if (config.use_class_token) p.class_token = Matrix::Zero(1, d);
  p.position = Matrix::Zero(config.max_tokens, d);
  p.layers.resize(config.num_layers);
  for (auto& lp : p.layers) {
    lp.ln1_gain = Matrix::Zero(1, d);
    lp.ln1_bias = Matrix::Zero(1, d);
    lp.wq = Matrix::Zero(d, d);
    lp.wk = Matrix::Zero(d, d);
    lp.wv = Matrix::Zero(d, d);
    lp.bq = Matrix::Zero(1, d);
    lp.bk = Matrix::Zero(1, d);
    lp.bv = Matrix::Zero(1, d);
    lp.wo = Matrix::Zero(d, d);
    lp.ln2_gain = Matrix::Zero(1, d);
    lp.ln2_bias = Matrix::Zero(1, d);
    lp.w1 = Matrix::Zero(d, f);
    lp.b1 = Matrix::Zero(1, f);
    lp.w2 = Matrix::Zero(f, d);
    lp.b2 = Matrix::Zero(1, d);
  }
  p.final_ln_gain = Matrix::Zero(1, d);
  p.final_ln_bias = Matrix::Zero(1, d);
  p.head_weight = Matrix::Zero(d, config.num_classes);
  p.head_bias = Matrix::Zero(1, config.num_classes);
  return p;
}

}  // namespace

TransformerModel ZeroModel(const ModelConfig& config) {
  config.Validate();
  TransformerModel model;
  model.config = config;
  model.params = AllocateParameters(config);
  return model;
}

TransformerModel RandomModel(const ModelConfig& config, uint64_t seed) {
  TransformerModel model = ZeroModel(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto fill = [&](Matrix& m, float stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
  };
  const int d = config.hidden_dim;
  Parameters& p = model.params;
  if (config.mode == Mode::kSequence) {
    fill(p.token_embedding, 3.0f);
  } else {
    fill(p.patch_weight, 1.0f / std::sqrt(float(config.patch_dim)));
  }
  if (config.use_class_token) fill(p.class_token, 1.0f);
  fill(p.position, 0.5f);
  const float proj = 1.0f / std::sqrt(float(d));
  // Wider query/key init gives peaked attention from the first step.
  const float qk = 2.0f * proj;
  for (auto& lp : p.layers) {
    lp.ln1_gain.setOnes();
    lp.ln2_gain.setOnes();
    fill(lp.wq, qk);
    fill(lp.wk, qk);
    fill(lp.wv, proj);
    fill(lp.wo, proj);
    fill(lp.w1, proj);
    fill(lp.w2, 1.0f / std::sqrt(float(config.ffn_dim)));
  }
  p.final_ln_gain.setOnes();
  fill(p.head_weight, proj);
  return model;
}

std::vector<AttentionTrace> Forward(const TransformerModel& model,
                                    std::span<const ModelInput> batch,
                                    const ForwardOptions& options) {
  std::vector<AttentionTrace> traces;
  traces.reserve(batch.size());
  for (const ModelInput& input : batch) {
    traces.push_back(Forward(model, input, options));
  }
  return traces;
}

AttentionTrace Forward(const TransformerModel& model, const ModelInput& input,
                       const ForwardOptions& options) {
  CheckInput(model.config, input);
  Cache<float> cache;
  ForwardCached(model.params, model.config, input, &options, cache);
  AttentionTrace trace;
  trace.logits = cache.logits.row(0);
  trace.tokens = cache.kinds;
  if (options.capture) {
    const int n = model.config.max_tokens;
    trace.attention.resize(model.config.num_layers);
    trace.hidden.resize(model.config.num_layers);
    for (int l = 0; l < model.config.num_layers; ++l) {
      const auto& c = cache.layers[l];
      if (c.bypassed) {
        // Bypassed layers report the identity (no mixing).
        trace.attention[l].assign(model.config.num_heads, Matrix::Identity(n, n));
      } else {
        trace.attention[l] = c.attn;
      }
      trace.hidden[l] =
          l + 1 < model.config.num_layers ? cache.layers[l + 1].x_in : cache.x_out;
    }
  }
  return trace;
}

RowVector Logits(const TransformerModel& model, const ModelInput& input) {
  CheckInput(model.config, input);
  Cache<float> cache;
  ForwardCached<float>(model.params, model.config, input, nullptr, cache);
  return cache.logits.row(0);
}

int Predict(const TransformerModel& model, const ModelInput& input) {
  const RowVector logits = Logits(model, input);
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

LossAndGradient ComputeGradient(const ParametersT<double>& params,
                                const ModelConfig& config,
                                const TrainingExample& example) {
  CheckInput(config, example.input);
  Cache<double> cache;
  ForwardCached<double>(params, config, example.input, nullptr, cache);
  MatrixT<double> dlogits;
  LossAndGradient out;
  out.loss = CrossEntropy(cache.logits, example.label, &dlogits);
  out.gradient = ParametersT<double>::ZerosLike(params);
  Backward(params, config, example.input, cache, dlogits, out.gradient);
  return out;
}

double ComputeLoss(const ParametersT<double>& params, const ModelConfig& config,
                   const TrainingExample& example) {
  Cache<double> cache;
  ForwardCached<double>(params, config, example.input, nullptr, cache);
  return CrossEntropy<double>(cache.logits, example.label, nullptr);
}

TrainResult Train(const ModelConfig& config,
                  std::span<const TrainingExample> dataset,
                  const TrainHyper& hyper) {
  config.Validate();
  if (dataset.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "empty training set");
  }
  if (hyper.epochs < 1 || hyper.batch_size < 1) {
    throw Error(ErrorCode::kInvalidArgument, "epochs and batch_size must be >= 1");
  }
  for (const TrainingExample& ex : dataset) {
    if (ex.label < 0 || ex.label >= config.num_classes) {
      throw Error(ErrorCode::kInvalidArgument, "label outside class range");
    }
    CheckInput(config, ex.input);
  }

  TrainResult result;
  result.model = RandomModel(config, hyper.seed);
  result.model.train_seed = hyper.seed;
  Parameters& params = result.model.params;
  Parameters grad = Parameters::ZerosLike(params);
  Parameters velocity = Parameters::ZerosLike(params);

  const std::size_t n = dataset.size();
  const std::size_t steps_per_epoch = (n + hyper.batch_size - 1) / hyper.batch_size;
  const double total_steps = double(steps_per_epoch) * hyper.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);

  Cache<float> cache;
  MatrixT<float> dlogits;
  std::size_t step = 0;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < n; begin += hyper.batch_size) {
      const std::size_t end = std::min(n, begin + hyper.batch_size);
      for (auto& [name, m] : grad.Tensors()) m->setZero();
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const TrainingExample& ex = dataset[order[i]];
        ForwardCached<float>(params, config, ex.input, nullptr, cache);
        batch_loss += CrossEntropy(cache.logits, ex.label, &dlogits);
        Backward(params, config, ex.input, cache, dlogits, grad);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::kDivergedTraining,
                    "non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      const float inv_batch = 1.0f / float(end - begin);
      const float lr = float(hyper.learning_rate * 0.5 *
                             (1.0 + std::cos(M_PI * double(step) / total_steps)));
      auto pt = params.Tensors();
      auto gt = grad.Tensors();
      auto vt = velocity.Tensors();
      for (std::size_t t = 0; t < pt.size(); ++t) {
        Matrix& v = *vt[t].second;
        v = hyper.momentum * v + inv_batch * *gt[t].second;
        *pt[t].second -= lr * v;
      }
      ++step;
    }
    if (!params.head_weight.allFinite()) {
      throw Error(ErrorCode::kDivergedTraining, "parameters became non-finite");
    }
  }
  result.final_loss = epoch_loss / double(n);

  std::size_t correct = 0;
  for (const TrainingExample& ex : dataset) {
    if (Predict(result.model, ex.input) == ex.label) ++correct;
  }
  result.training_accuracy = double(correct) / double(n);
  result.reached_floor = result.training_accuracy >= hyper.accuracy_floor;
  return result;
}

GradientCheckResult GradientCheck(const TransformerModel& model,
                                  const TrainingExample& example,
                                  int num_probes, uint64_t seed,
                                  const GradientFn& gradient_fn) {
  constexpr double kStep = 1e-3;
  constexpr double kSkipBelow = 1e-8;
  ParametersT<double> params = model.params.Cast<double>();
  const LossAndGradient analytic =
      gradient_fn ? gradient_fn(params, model.config, example)
                  : ComputeGradient(params, model.config, example);

  auto tensors = params.Tensors();
  auto grads = analytic.gradient.Tensors();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_tensor(0, tensors.size() - 1);

  GradientCheckResult result;
  for (int probe = 0; probe < num_probes; ++probe) {
    const std::size_t t = pick_tensor(rng);
    MatrixT<double>& m = *tensors[t].second;
    std::uniform_int_distribution<Eigen::Index> pick_index(0, m.size() - 1);
    const Eigen::Index i = pick_index(rng);
    const double saved = m.data()[i];
    m.data()[i] = saved + kStep;
    const double up = ComputeLoss(params, model.config, example);
    m.data()[i] = saved - kStep;
    const double down = ComputeLoss(params, model.config, example);
    m.data()[i] = saved;
    const double numeric = (up - down) / (2 * kStep);
    const double exact = grads[t].second->data()[i];
    const double scale = std::max(std::abs(numeric), std::abs(exact));
    if (scale < kSkipBelow) {
      ++result.skipped;
      continue;
    }
    ++result.checked;
    result.max_relative_error =
        std::max(result.max_relative_error, std::abs(numeric - exact) / scale);
  }
  return result;
}

TransformerModel DeactivateHeads(const TransformerModel& model,
                                 const std::set<HeadIndex>& heads) {
  const ModelConfig& config = model.config;
  for (const HeadIndex& h : heads) {
    if (h.layer < 0 || h.layer >= config.num_layers || h.head < 0 ||
        h.head >= config.num_heads) {
      throw Error(ErrorCode::kIndexOutOfRange,
                  "head (" + std::to_string(h.layer) + ", " +
                      std::to_string(h.head) + ") outside the model");
    }
  }
  TransformerModel out = model;
  const int dk = config.head_dim();
  for (const HeadIndex& h : heads) {
    LayerParamsT<float>& lp = out.params.layers[h.layer];
    const int c0 = h.head * dk;
    lp.wq.middleCols(c0, dk).setZero();
    lp.wk.middleCols(c0, dk).setZero();
    lp.wv.middleCols(c0, dk).setZero();
    lp.bq.middleCols(c0, dk).setZero();
    lp.bk.middleCols(c0, dk).setZero();
    lp.bv.middleCols(c0, dk).setZero();
    lp.wo.middleRows(c0, dk).setZero();
    out.deactivated_heads.insert(h);
  }
  return out;
}

// Container layout:
//   AHTD-MODEL 1
//   <key> <value>             (config, seed, fingerprint, deactivated heads)
//   tensor <name> <rows> <cols>
//   ...
//   end_header
//   <float32 LE blobs, in tensor order>
void WriteModel(const TransformerModel& model, std::ostream& out) {
  const ModelConfig& c = model.config;
  out << "AHTD-MODEL 1\n";
  out << "mode " << ModeName(c.mode) << "\n";
  out << "num_layers " << c.num_layers << "\n";
  out << "num_heads " << c.num_heads << "\n";
  out << "hidden_dim " << c.hidden_dim << "\n";
  out << "ffn_dim " << c.ffn_dim << "\n";
  out << "vocab_size " << c.vocab_size << "\n";
  out << "patch_dim " << c.patch_dim << "\n";
  out << "max_tokens " << c.max_tokens << "\n";
  out << "num_classes " << c.num_classes << "\n";
  out << "use_class_token " << (c.use_class_token ? 1 : 0) << "\n";
  out << "train_seed " << model.train_seed << "\n";
  out << "dataset_fingerprint "
      << (model.dataset_fingerprint.empty() ? "-" : model.dataset_fingerprint)
      << "\n";
  out << "deactivated_heads " << model.deactivated_heads.size();
  for (const HeadIndex& h : model.deactivated_heads) {
    out << " " << h.layer << ":" << h.head;
  }
  out << "\n";
  const auto tensors = model.params.Tensors();
  for (const auto& [name, m] : tensors) {
    out << "tensor " << name << " " << m->rows() << " " << m->cols() << "\n";
  }
  out << "end_header\n";
  std::vector<char> buffer;
  for (const auto& [name, m] : tensors) {
    buffer.resize(m->size() * sizeof(float));
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      uint32_t bits = std::bit_cast<uint32_t>(m->data()[i]);
      if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
      }
      std::memcpy(buffer.data() + i * sizeof(float), &bits, sizeof(bits));
    }
    out.write(buffer.data(), std::streamsize(buffer.size()));
  }
  if (!out) throw Error(ErrorCode::kIoError, "failed writing model");
}

TransformerModel ReadModel(std::istream& in) {
  auto parse_error = [](const std::string& what) {
    return Error(ErrorCode::kParseError, "model file: " + what);
  };
  std::string line;
  if (!std::getline(in, line) || Trim(line) != "AHTD-MODEL 1") {
    throw parse_error("missing or unsupported magic line");
  }
  ModelConfig c;
  TransformerModel model;
  struct TensorDecl {
    std::string name;
    long rows, cols;
  };
  std::vector<TensorDecl> decls;
  bool done = false;
  while (std::getline(in, line)) {
    line = Trim(line);
    if (line == "end_header") {
      done = true;
      break;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "mode") {
      std::string v;
      ls >> v;
      c.mode = ParseMode(v);
    } else if (key == "num_layers") {
      ls >> c.num_layers;
    } else if (key == "num_heads") {
      ls >> c.num_heads;
    } else if (key == "hidden_dim") {
      ls >> c.hidden_dim;
    } else if (key == "ffn_dim") {
      ls >> c.ffn_dim;
    } else if (key == "vocab_size") {
      ls >> c.vocab_size;
    } else if (key == "patch_dim") {
      ls >> c.patch_dim;
    } else if (key == "max_tokens") {
      ls >> c.max_tokens;
    } else if (key == "num_classes") {
      ls >> c.num_classes;
    } else if (key == "use_class_token") {
      int v = 0;
      ls >> v;
      c.use_class_token = v != 0;
    } else if (key == "train_seed") {
      ls >> model.train_seed;
    } else if (key == "dataset_fingerprint") {
      ls >> model.dataset_fingerprint;
      if (model.dataset_fingerprint == "-") model.dataset_fingerprint.clear();
    } else if (key == "deactivated_heads") {
      std::size_t count = 0;
      ls >> count;
      for (std::size_t i = 0; i < count; ++i) {
        std::string item;
        ls >> item;
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw parse_error("bad head '" + item + "'");
        model.deactivated_heads.insert(
            {std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
      }
    } else if (key == "tensor") {
      TensorDecl decl;
      ls >> decl.name >> decl.rows >> decl.cols;
      decls.push_back(decl);
    } else {
      throw parse_error("unknown header key '" + key + "'");
    }
    if (ls.fail()) throw parse_error("malformed line '" + line + "'");
  }
  if (!done) throw parse_error("header not terminated");
  model.config = c;
  TransformerModel shaped = ZeroModel(c);
  model.params = std::move(shaped.params);
  auto tensors = model.params.Tensors();
  if (tensors.size() != decls.size()) throw parse_error("tensor count mismatch");
  std::vector<char> buffer;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    Matrix& m = *tensors[t].second;
    if (tensors[t].first != decls[t].name || m.rows() != decls[t].rows ||
        m.cols() != decls[t].cols) {
      throw parse_error("tensor '" + decls[t].name + "' does not match config");
    }
    buffer.resize(m.size() * sizeof(float));
    in.read(buffer.data(), std::streamsize(buffer.size()));
    if (in.gcount() != std::streamsize(buffer.size())) {
      throw parse_error("truncated blob '" + decls[t].name + "'");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, buffer.data() + i * sizeof(float), sizeof(bits));
      if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
      }
      m.data()[i] = std::bit_cast<float>(bits);
    }
  }
  return model;
}

void SaveModel(const TransformerModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path);
  WriteModel(model, out);
}

TransformerModel LoadModel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return ReadModel(in);
}

}  // namespace ahtd::transformer
