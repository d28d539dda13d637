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

// A small pre-LayerNorm transformer encoder classifier with attention
// capture, deterministic SGD training and per-head deactivation.
//
// Token layout: when `use_class_token` is set, token 0 is a learned class
// token and tokens 1..n-1 carry content; otherwise all n tokens are content.
// Classification always reads out token 0. In sequence mode content slots
// holding kPadToken are padding and are masked out as attention keys.
//
// Head indices are zero-based (layer in [0, L), head in [0, H)).

#ifndef AHTD_TRANSFORMER_H_
#define AHTD_TRANSFORMER_H_

#include <compare>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ahtd/numerics.h"

namespace ahtd::transformer {

enum class Mode { kSequence, kGrid };

std::string_view ModeName(Mode mode);
Mode ParseMode(std::string_view name);

inline constexpr int32_t kPadToken = 0;

struct ModelConfig {
  int num_layers = 4;
  int num_heads = 4;
  int hidden_dim = 32;
  int ffn_dim = 64;
  int vocab_size = 0;  // sequence mode
  int patch_dim = 0;   // grid mode
  int max_tokens = 32;
  int num_classes = 2;
  Mode mode = Mode::kSequence;
  bool use_class_token = true;

  int head_dim() const { return hidden_dim / num_heads; }
  int content_slots() const { return max_tokens - (use_class_token ? 1 : 0); }

  // Throws kInvalidArgument on inconsistent settings.
  void Validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct HeadIndex {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadIndex&) const = default;
};

template <typename T>
using MatrixT =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct LayerParamsT {
  MatrixT<T> ln1_gain, ln1_bias;  // 1 x d
  // Head h owns columns [h*dk, (h+1)*dk) of the query/key/value projections
  // and rows [h*dk, (h+1)*dk) of the output projection.
  MatrixT<T> wq, wk, wv;  // d x d
  MatrixT<T> bq, bk, bv;  // 1 x d
  MatrixT<T> wo;          // d x d, no bias
  MatrixT<T> ln2_gain, ln2_bias;
  MatrixT<T> w1, b1;  // d x f, 1 x f
  MatrixT<T> w2, b2;  // f x d, 1 x d
};

template <typename T>
struct ParametersT {
  MatrixT<T> token_embedding;  // vocab x d, sequence mode only
  MatrixT<T> patch_weight;     // patch_dim x d, grid mode only
  MatrixT<T> patch_bias;       // 1 x d, grid mode only
  MatrixT<T> class_token;      // 1 x d when the class token is used
  MatrixT<T> position;         // n x d
  std::vector<LayerParamsT<T>> layers;
  MatrixT<T> final_ln_gain, final_ln_bias;
  MatrixT<T> head_weight;  // d x C
  MatrixT<T> head_bias;    // 1 x C

  // Every tensor paired with a stable name, in serialization order. Unused
  // tensors (empty matrices) are skipped.
  std::vector<std::pair<std::string, MatrixT<T>*>> Tensors();
  std::vector<std::pair<std::string, const MatrixT<T>*>> Tensors() const;

  // Same shapes as `like`, all zero.
  static ParametersT ZerosLike(const ParametersT& like);

  template <typename U>
  ParametersT<U> Cast() const;

  std::size_t ParameterCount() const;
};

using Parameters = ParametersT<float>;

struct TransformerModel {
  ModelConfig config;
  Parameters params;
  std::set<HeadIndex> deactivated_heads;
  uint64_t train_seed = 0;
  std::string dataset_fingerprint;
};

// Every parameter zero (and layer-norm gains zero): attention is uniform.
TransformerModel ZeroModel(const ModelConfig& config);
// Scaled-normal initialization; deterministic in `seed`.
TransformerModel RandomModel(const ModelConfig& config, uint64_t seed);

// One encoded sample: exactly `content_slots()` entries.
struct ModelInput {
  std::vector<int32_t> tokens;  // sequence mode
  Matrix patches;               // grid mode: content_slots x patch_dim
};

enum class TokenKind : uint8_t { kClass, kContent, kPadding };

struct AttentionTrace {
  RowVector logits;                            // num_classes
  std::vector<std::vector<Matrix>> attention;  // [layer][head], n x n
  std::vector<Matrix> hidden;                  // [layer] output, n x d
  std::vector<TokenKind> tokens;               // n
};

struct ForwardOptions {
  bool capture = true;
  // Called with each head's attention matrix after the softmax; may rewrite
  // it. Test instrumentation.
  std::function<void(int layer, int head, Matrix& attention)> attention_hook;
  // Layers whose whole attention branch is skipped (residual passthrough).
  std::vector<bool> bypass_attention;
};

// Throws kShapeMismatch on malformed inputs.
std::vector<AttentionTrace> Forward(const TransformerModel& model,
                                    std::span<const ModelInput> batch,
                                    const ForwardOptions& options = {});
AttentionTrace Forward(const TransformerModel& model, const ModelInput& input,
                       const ForwardOptions& options = {});

// Logits only; the cheap path used by evaluation and the outlier filter.
RowVector Logits(const TransformerModel& model, const ModelInput& input);
int Predict(const TransformerModel& model, const ModelInput& input);

struct TrainingExample {
  ModelInput input;
  int label = 0;
};

struct TrainHyper {
  int epochs = 16;
  int batch_size = 32;
  float learning_rate = 0.1f;
  float momentum = 0.9f;
  uint64_t seed = 1;
  double accuracy_floor = 0.0;
};

struct TrainResult {
  TransformerModel model;
  double training_accuracy = 0.0;
  double final_loss = 0.0;
  bool reached_floor = false;
};

// Mini-batch SGD with momentum and a cosine-decayed learning rate.
// Bit-reproducible for identical inputs on one platform. Throws
// kDivergedTraining if the loss becomes non-finite.
TrainResult Train(const ModelConfig& config,
                  std::span<const TrainingExample> dataset,
                  const TrainHyper& hyper);

// Cross-entropy loss and its gradient for one example.
struct LossAndGradient {
  double loss = 0.0;
  ParametersT<double> gradient;
};
LossAndGradient ComputeGradient(const ParametersT<double>& params,
                                const ModelConfig& config,
                                const TrainingExample& example);
double ComputeLoss(const ParametersT<double>& params, const ModelConfig& config,
                   const TrainingExample& example);

using GradientFn = std::function<LossAndGradient(
    const ParametersT<double>&, const ModelConfig&, const TrainingExample&)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  int checked = 0;  // parameters compared
  int skipped = 0;  // both gradients below 1e-8
};

// Compares analytic gradients with central finite differences (step 1e-3)
// on `num_probes` randomly chosen parameters. Runs in double precision.
GradientCheckResult GradientCheck(const TransformerModel& model,
                                  const TrainingExample& example,
                                  int num_probes = 64, uint64_t seed = 0,
                                  const GradientFn& gradient_fn = {});

// Zeroes the query/key/value slices and the output-projection rows of each
// listed head; every other parameter is untouched. Throws kIndexOutOfRange.
TransformerModel DeactivateHeads(const TransformerModel& model,
                                 const std::set<HeadIndex>& heads);

// Model container: a text header followed by little-endian float32 blobs.
void WriteModel(const TransformerModel& model, std::ostream& out);
TransformerModel ReadModel(std::istream& in);
void SaveModel(const TransformerModel& model, const std::string& path);
TransformerModel LoadModel(const std::string& path);

}  // namespace ahtd::transformer

#endif  // AHTD_TRANSFORMER_H_
