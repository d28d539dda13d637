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

#include "ahtd/datasets.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"

namespace ahtd::datasets {
namespace {

using Image = std::vector<float>;

std::string FloatToString(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::string DoubleToString(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double ParseDouble(const std::string& s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kParseError, "bad number '" + s + "'");
  }
  return v;
}

float ParseFloat(const std::string& s) {
  float v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kParseError, "bad float '" + s + "'");
  }
  return v;
}

// Shape painters for the grid task. Coordinates scale with the image side;
// (dy, dx) is the jitter offset.
using Painter = std::function<void(Image&, int side, int dy, int dx, float v)>;

void Put(Image& img, int side, int r, int c, float v) {
  if (r >= 0 && r < side && c >= 0 && c < side) img[r * side + c] = v;
}

const std::vector<Painter>& ShapePainters() {
  static const std::vector<Painter> painters = {
      // horizontal bar
      [](Image& img, int s, int dy, int dx, float v) {
        for (int r = s / 2 - 1; r <= s / 2; ++r)
          for (int c = s * 3 / 16; c < s * 13 / 16; ++c) Put(img, s, r + dy, c + dx, v);
      },
      // vertical bar
      [](Image& img, int s, int dy, int dx, float v) {
        for (int c = s / 2 - 1; c <= s / 2; ++c)
          for (int r = s * 3 / 16; r < s * 13 / 16; ++r) Put(img, s, r + dy, c + dx, v);
      },
      // hollow square
      [](Image& img, int s, int dy, int dx, float v) {
        const int lo = s / 4, hi = s * 3 / 4 - 1;
        for (int i = lo; i <= hi; ++i) {
          Put(img, s, lo + dy, i + dx, v);
          Put(img, s, hi + dy, i + dx, v);
          Put(img, s, i + dy, lo + dx, v);
          Put(img, s, i + dy, hi + dx, v);
        }
      },
      // main diagonal
      [](Image& img, int s, int dy, int dx, float v) {
        for (int i = s * 3 / 16; i < s * 13 / 16; ++i) {
          Put(img, s, i + dy, i + dx, v);
          Put(img, s, i + dy, i + 1 + dx, v);
        }
      },
      // anti-diagonal
      [](Image& img, int s, int dy, int dx, float v) {
        for (int i = s * 3 / 16; i < s * 13 / 16; ++i) {
          Put(img, s, i + dy, s - 1 - i + dx, v);
          Put(img, s, i + dy, s - 2 - i + dx, v);
        }
      },
      // filled block, upper left
      [](Image& img, int s, int dy, int dx, float v) {
        for (int r = s / 8; r < s * 3 / 8; ++r)
          for (int c = s / 8; c < s * 3 / 8; ++c) Put(img, s, r + dy, c + dx, v);
      },
      // filled block, lower right
      [](Image& img, int s, int dy, int dx, float v) {
        for (int r = s * 5 / 8; r < s * 7 / 8; ++r)
          for (int c = s * 5 / 8; c < s * 7 / 8; ++c) Put(img, s, r + dy, c + dx, v);
      },
      // two short bars at top and bottom
      [](Image& img, int s, int dy, int dx, float v) {
        for (int c = s / 4; c < s * 3 / 4; ++c) {
          Put(img, s, s / 8 + dy, c + dx, v);
          Put(img, s, s * 7 / 8 - 1 + dy, c + dx, v);
        }
      },
  };
  return painters;
}

int ResolvePosition(const Perturbation& p, int length, int slots,
                    uint64_t seed) {
  const int k = static_cast<int>(p.tokens.size());
  const int max_pos = std::min(length, slots - k);
  if (p.position >= 0) return std::min(p.position, max_pos);
  std::mt19937_64 rng(seed);
  return std::uniform_int_distribution<int>(0, max_pos)(rng);
}

std::vector<int32_t> NeutralTokens(const TaskConfig& task) {
  std::vector<int32_t> out(task.num_neutral_tokens);
  std::iota(out.begin(), out.end(), task.first_neutral());
  return out;
}

}  // namespace

std::string_view ProvenanceName(Provenance p) {
  switch (p) {
    case Provenance::kClean:
      return "clean";
    case Provenance::kPoisoned:
      return "poisoned";
    case Provenance::kSpurious:
      return "spurious";
  }
  return "clean";
}

namespace {
Provenance ParseProvenance(const std::string& s) {
  if (s == "clean") return Provenance::kClean;
  if (s == "poisoned") return Provenance::kPoisoned;
  if (s == "spurious") return Provenance::kSpurious;
  throw Error(ErrorCode::kParseError, "unknown provenance '" + s + "'");
}
}  // namespace

void TaskConfig::Validate() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidArgument, "task config: " + what);
  };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (mode == Mode::kSequence) {
    if (content_slots < 4) fail("content_slots must be >= 4");
    if (min_length < 1 || min_length > content_slots) fail("bad min_length");
    if (num_classes * indicative_per_class > num_content_tokens) {
      fail("not enough content tokens for the indicative subsets");
    }
    if (num_neutral_tokens < 4) fail("need at least 4 neutral tokens");
    if (indicative_rate <= 0 || indicative_rate > 1) fail("bad indicative_rate");
    if (neutral_rate < 0 || neutral_rate >= 1) fail("bad neutral_rate");
  } else {
    if (num_classes > static_cast<int>(ShapePainters().size())) {
      fail("grid mode supports at most " +
           std::to_string(ShapePainters().size()) + " classes");
    }
    if (grid_side < 2) fail("grid_side must be >= 2");
    if (patch_side < 3) fail("patch_side must be >= 3 to hold a 3x3 stencil");
    if (pixel_noise < 0) fail("pixel_noise must be >= 0");
  }
}

std::string TaskConfig::Fingerprint() const {
  std::ostringstream s;
  s << transformer::ModeName(mode) << "|" << num_classes << "|"
    << content_slots << "|" << min_length << "|" << num_content_tokens << "|"
    << indicative_per_class << "|" << num_neutral_tokens << "|"
    << indicative_rate << "|" << neutral_rate << "|" << grid_side << "|"
    << patch_side << "|" << pixel_noise;
  return ahtd::Fingerprint().Update(s.str()).Hex();
}

const std::array<Stencil, kNumTriggerPatterns>& TriggerPatterns() {
  static const std::array<Stencil, kNumTriggerPatterns> patterns = {{
      {0, 1, 0, 1, 1, 1, 0, 1, 0},  // summation
      {1, 1, 0, 0, 1, 0, 1, 0, 1},  // lambda
      {1, 0, 1, 0, 1, 0, 1, 0, 1},  // multiplication
      {1, 1, 1, 1, 0, 1, 1, 1, 1},  // cube
      {0, 1, 0, 1, 0, 1, 1, 1, 1},  // polygon
      {1, 0, 1, 1, 1, 1, 0, 1, 0},  // star
  }};
  return patterns;
}

std::string_view TriggerPatternName(int index) {
  static constexpr std::string_view kNames[kNumTriggerPatterns] = {
      "summation", "lambda", "multiplication", "cube", "polygon", "star"};
  if (index < 0 || index >= kNumTriggerPatterns) return "custom";
  return kNames[index];
}

void PoisonSpec::Validate(const TaskConfig& task) const {
  if (target_class < 0 || target_class >= task.num_classes) {
    throw Error(ErrorCode::kInvalidArgument, "target class out of range");
  }
  if (!(poison_rate >= kMinPoisonRate && poison_rate <= kMaxPoisonRate)) {
    throw Error(ErrorCode::kRateOutOfRange,
                "poison rate " + std::to_string(poison_rate) +
                    " outside [0.10, 0.20]");
  }
  if (task.mode == Mode::kSequence) {
    if (trigger.tokens.empty() || trigger.tokens.size() > 3) {
      throw Error(ErrorCode::kInvalidArgument, "trigger must have 1-3 tokens");
    }
    for (int32_t t : trigger.tokens) {
      if (!task.IsNeutral(t)) {
        throw Error(ErrorCode::kInvalidArgument,
                    "trigger token " + std::to_string(t) + " is not neutral");
      }
    }
  } else {
    if (trigger.patch_row < 0 || trigger.patch_row >= task.grid_side ||
        trigger.patch_col < 0 || trigger.patch_col >= task.grid_side) {
      throw Error(ErrorCode::kInvalidArgument, "trigger patch outside grid");
    }
  }
}

std::string PoisonSpec::Fingerprint() const {
  std::ostringstream s;
  for (int32_t t : trigger.tokens) s << t << ",";
  s << "|" << trigger.position << "|";
  for (uint8_t b : trigger.stencil) s << int(b);
  s << "|" << trigger.patch_row << "," << trigger.patch_col << "|" << pattern_id
    << "|" << target_class << "|" << poison_rate;
  return ahtd::Fingerprint().Update(s.str()).Hex();
}

std::string LabeledDataset::Fingerprint() const {
  std::ostringstream s;
  WriteDataset(*this, s);
  return ahtd::Fingerprint().Update(s.str()).Hex();
}

LabeledDataset GenerateSequenceTask(const TaskConfig& task, int num_samples,
                                    uint64_t seed,
                                    const std::set<int32_t>& excluded) {
  task.Validate();
  if (task.mode != Mode::kSequence) {
    throw Error(ErrorCode::kInvalidArgument, "task is not in sequence mode");
  }
  std::vector<int32_t> neutral;
  for (int32_t t : NeutralTokens(task)) {
    if (!excluded.contains(t)) neutral.push_back(t);
  }
  const int num_indicative = task.num_classes * task.indicative_per_class;
  const int num_shared = task.num_content_tokens - num_indicative;

  LabeledDataset out;
  out.task = task;
  out.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> length_dist(task.min_length,
                                                 task.content_slots);
  std::vector<int> labels(num_samples);
  for (int i = 0; i < num_samples; ++i) labels[i] = i % task.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  out.samples.reserve(num_samples);
  for (int i = 0; i < num_samples; ++i) {
    Sample s;
    s.label = labels[i];
    const int length = length_dist(rng);
    s.tokens.reserve(length);
    for (int t = 0; t < length; ++t) {
      const double u = unit(rng);
      int32_t token;
      if (u < task.neutral_rate && !neutral.empty()) {
        token = neutral[rng() % neutral.size()];
      } else if (unit(rng) < task.indicative_rate || num_shared == 0) {
        token = 1 + s.label * task.indicative_per_class +
                static_cast<int32_t>(rng() % task.indicative_per_class);
      } else {
        token = 1 + num_indicative + static_cast<int32_t>(rng() % num_shared);
      }
      s.tokens.push_back(token);
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

LabeledDataset GenerateGridTask(const TaskConfig& task, int num_samples,
                                uint64_t seed) {
  task.Validate();
  if (task.mode != Mode::kGrid) {
    throw Error(ErrorCode::kInvalidArgument, "task is not in grid mode");
  }
  const int side = task.image_side();
  LabeledDataset out;
  out.task = task;
  out.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_real_distribution<float> intensity(0.7f, 1.0f);
  std::normal_distribution<float> noise(0.0f, float(task.pixel_noise));
  std::vector<int> labels(num_samples);
  for (int i = 0; i < num_samples; ++i) labels[i] = i % task.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  out.samples.reserve(num_samples);
  for (int i = 0; i < num_samples; ++i) {
    Sample s;
    s.label = labels[i];
    s.pixels.assign(side * side, 0.0f);
    const int dy = jitter(rng);
    const int dx = jitter(rng);
    ShapePainters()[s.label](s.pixels, side, dy, dx, intensity(rng));
    for (float& p : s.pixels) p = std::clamp(p + noise(rng), 0.0f, 1.0f);
    out.samples.push_back(std::move(s));
  }
  return out;
}

LabeledDataset GenerateTask(const TaskConfig& task, int num_samples,
                            uint64_t seed, const std::set<int32_t>& excluded) {
  return task.mode == Mode::kSequence
             ? GenerateSequenceTask(task, num_samples, seed, excluded)
             : GenerateGridTask(task, num_samples, seed);
}

bool ContainsPerturbation(const Sample& sample, const Perturbation& p,
                          const TaskConfig& task) {
  if (task.mode == Mode::kSequence) {
    for (int32_t t : p.tokens) {
      if (std::find(sample.tokens.begin(), sample.tokens.end(), t) !=
          sample.tokens.end()) {
        return true;
      }
    }
    return false;
  }
  const int side = task.image_side();
  const int r0 = p.patch_row * task.patch_side;
  const int c0 = p.patch_col * task.patch_side;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (sample.pixels[(r0 + r) * side + c0 + c] != float(p.stencil[r * 3 + c])) {
        return false;
      }
    }
  }
  return true;
}

Sample StampPerturbation(const Sample& sample, const Perturbation& p,
                         const TaskConfig& task, uint64_t seed) {
  Sample out = sample;
  if (task.mode == Mode::kSequence) {
    if (p.tokens.empty() ||
        static_cast<int>(p.tokens.size()) > task.content_slots) {
      throw Error(ErrorCode::kInvalidArgument, "bad perturbation token count");
    }
    const int pos = ResolvePosition(p, static_cast<int>(sample.tokens.size()),
                                    task.content_slots, seed);
    out.tokens.insert(out.tokens.begin() + pos, p.tokens.begin(), p.tokens.end());
    if (static_cast<int>(out.tokens.size()) > task.content_slots) {
      out.tokens.resize(task.content_slots);
    }
    return out;
  }
  if (p.patch_row < 0 || p.patch_row >= task.grid_side || p.patch_col < 0 ||
      p.patch_col >= task.grid_side) {
    throw Error(ErrorCode::kInvalidArgument, "stencil patch outside grid");
  }
  const int side = task.image_side();
  const int r0 = p.patch_row * task.patch_side;
  const int c0 = p.patch_col * task.patch_side;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      out.pixels[(r0 + r) * side + c0 + c] = float(p.stencil[r * 3 + c]);
    }
  }
  return out;
}

Sample ApplyPerturbation(const Sample& sample, const Perturbation& p,
                         const TaskConfig& task, uint64_t seed) {
  if (ContainsPerturbation(sample, p, task)) {
    throw Error(ErrorCode::kTriggerCollision,
                "sample already contains the perturbation");
  }
  return StampPerturbation(sample, p, task, seed);
}

Sample InjectTrigger(const Sample& sample, const PoisonSpec& spec,
                     const TaskConfig& task, uint64_t seed) {
  return ApplyPerturbation(sample, spec.trigger, task, seed);
}

LabeledDataset PoisonDataset(const LabeledDataset& dataset,
                             const PoisonSpec& spec, uint64_t seed) {
  spec.Validate(dataset.task);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    if (s.provenance != Provenance::kClean) {
      throw Error(ErrorCode::kInvalidArgument, "dataset is not all-clean");
    }
    if (ContainsPerturbation(s, spec.trigger, dataset.task)) {
      throw Error(ErrorCode::kTriggerCollision,
                  "clean sample " + std::to_string(i) + " contains the trigger");
    }
    if (s.label != spec.target_class) eligible.push_back(i);
  }
  const std::size_t count = static_cast<std::size_t>(
      std::floor(spec.poison_rate * double(dataset.samples.size()) + 1e-9));
  if (count > eligible.size()) {
    throw Error(ErrorCode::kRateOutOfRange,
                "not enough non-target samples to poison");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());

  LabeledDataset out = dataset;
  out.spec_fingerprint = spec.Fingerprint();
  for (std::size_t i : eligible) {
    Sample& s = out.samples[i];
    s = InjectTrigger(s, spec, dataset.task, MixSeed(seed, i));
    s.label = spec.target_class;
    s.provenance = Provenance::kPoisoned;
  }
  return out;
}

Perturbation RandomSpuriousPerturbation(const PoisonSpec& spec,
                                        const TaskConfig& task, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Perturbation p;
  if (task.mode == Mode::kSequence) {
    std::vector<int32_t> pool;
    for (int32_t t : NeutralTokens(task)) {
      if (std::find(spec.trigger.tokens.begin(), spec.trigger.tokens.end(), t) ==
          spec.trigger.tokens.end()) {
        pool.push_back(t);
      }
    }
    p.tokens = {pool[std::uniform_int_distribution<std::size_t>(
        0, pool.size() - 1)(rng)]};
    p.position = -1;
    return p;
  }
  std::uniform_int_distribution<int> bit(0, 1);
  std::uniform_int_distribution<int> cell(0, task.grid_side - 1);
  do {
    int lit = 0;
    for (uint8_t& b : p.stencil) {
      b = static_cast<uint8_t>(bit(rng));
      lit += b;
    }
    if (lit < 3) continue;
    p.patch_row = cell(rng);
    p.patch_col = cell(rng);
  } while (p.stencil == spec.trigger.stencil ||
           std::count(p.stencil.begin(), p.stencil.end(), 1) < 3);
  return p;
}

Sample MakeSpurious(const Sample& sample, const PoisonSpec& spec,
                    const TaskConfig& task, uint64_t seed) {
  const Perturbation p = RandomSpuriousPerturbation(spec, task, seed);
  // Repeating an existing neutral token is still a valid perturbation.
  Sample out = StampPerturbation(sample, p, task, MixSeed(seed, 1));
  out.provenance = Provenance::kSpurious;
  return out;
}

PoisonSpec RandomPoisonSpec(const TaskConfig& task, uint64_t seed, bool phrase) {
  std::mt19937_64 rng(seed);
  PoisonSpec spec;
  spec.target_class = std::uniform_int_distribution<int>(0, task.num_classes - 1)(rng);
  spec.poison_rate =
      std::uniform_real_distribution<double>(kMinPoisonRate, kMaxPoisonRate)(rng);
  if (task.mode == Mode::kSequence) {
    std::vector<int32_t> pool = NeutralTokens(task);
    std::shuffle(pool.begin(), pool.end(), rng);
    const int k = phrase ? std::uniform_int_distribution<int>(2, 3)(rng) : 1;
    spec.trigger.tokens.assign(pool.begin(), pool.begin() + k);
    spec.trigger.position = -1;
  } else {
    spec.pattern_id =
        std::uniform_int_distribution<int>(0, kNumTriggerPatterns - 1)(rng);
    spec.trigger.stencil = TriggerPatterns()[spec.pattern_id];
    std::uniform_int_distribution<int> cell(0, task.grid_side - 1);
    spec.trigger.patch_row = cell(rng);
    spec.trigger.patch_col = cell(rng);
  }
  return spec;
}

transformer::ModelInput Encode(const Sample& sample, const TaskConfig& task) {
  transformer::ModelInput input;
  if (task.mode == Mode::kSequence) {
    input.tokens = sample.tokens;
    input.tokens.resize(task.content_slots, transformer::kPadToken);
    return input;
  }
  const int side = task.image_side();
  const int ps = task.patch_side;
  if (static_cast<int>(sample.pixels.size()) != side * side) {
    throw Error(ErrorCode::kShapeMismatch, "image has the wrong pixel count");
  }
  input.patches.resize(task.num_patches(), task.patch_dim());
  for (int pr = 0; pr < task.grid_side; ++pr) {
    for (int pc = 0; pc < task.grid_side; ++pc) {
      const int patch = pr * task.grid_side + pc;
      for (int r = 0; r < ps; ++r) {
        for (int c = 0; c < ps; ++c) {
          input.patches(patch, r * ps + c) =
              sample.pixels[(pr * ps + r) * side + pc * ps + c];
        }
      }
    }
  }
  return input;
}

std::vector<transformer::ModelInput> EncodeAll(const std::vector<Sample>& samples,
                                               const TaskConfig& task) {
  std::vector<transformer::ModelInput> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(Encode(s, task));
  return out;
}

std::vector<transformer::TrainingExample> ToTrainingExamples(
    const LabeledDataset& dataset) {
  std::vector<transformer::TrainingExample> out;
  out.reserve(dataset.samples.size());
  for (const Sample& s : dataset.samples) {
    out.push_back({Encode(s, dataset.task), s.label});
  }
  return out;
}

transformer::ModelConfig ModelConfigFor(const TaskConfig& task,
                                        transformer::ModelConfig base) {
  base.mode = task.mode;
  base.num_classes = task.num_classes;
  const int content =
      task.mode == Mode::kSequence ? task.content_slots : task.num_patches();
  base.max_tokens = content + (base.use_class_token ? 1 : 0);
  if (task.mode == Mode::kSequence) {
    base.vocab_size = task.vocab_size();
    base.patch_dim = 0;
  } else {
    base.patch_dim = task.patch_dim();
    base.vocab_size = 0;
  }
  return base;
}

// Layout:
//   AHTD-DATASET 1
//   task <mode> <num_classes> <content_slots> <min_length> <num_content>
//        <indicative_per_class> <num_neutral> <indicative_rate> <neutral_rate>
//        <grid_side> <patch_side> <pixel_noise>
//   seed <u64>
//   spec <fingerprint or ->
//   samples <count>
//   <label> <provenance> <length> <values...>     one line per sample
void WriteDataset(const LabeledDataset& dataset, std::ostream& out) {
  const TaskConfig& t = dataset.task;
  out << "AHTD-DATASET 1\n";
  out << "task " << transformer::ModeName(t.mode) << " " << t.num_classes << " "
      << t.content_slots << " " << t.min_length << " " << t.num_content_tokens
      << " " << t.indicative_per_class << " " << t.num_neutral_tokens << " "
      << DoubleToString(t.indicative_rate) << " "
      << DoubleToString(t.neutral_rate) << " " << t.grid_side << " "
      << t.patch_side << " " << DoubleToString(t.pixel_noise) << "\n";
  out << "seed " << dataset.seed << "\n";
  out << "spec "
      << (dataset.spec_fingerprint.empty() ? "-" : dataset.spec_fingerprint)
      << "\n";
  out << "samples " << dataset.samples.size() << "\n";
  for (const Sample& s : dataset.samples) {
    out << s.label << " " << ProvenanceName(s.provenance);
    if (t.mode == Mode::kSequence) {
      out << " " << s.tokens.size();
      for (int32_t tok : s.tokens) out << " " << tok;
    } else {
      out << " " << s.pixels.size();
      for (float p : s.pixels) out << " " << FloatToString(p);
    }
    out << "\n";
  }
}

LabeledDataset ReadDataset(std::istream& in) {
  auto fail = [](const std::string& what) {
    return Error(ErrorCode::kParseError, "dataset file: " + what);
  };
  std::string line, key;
  if (!std::getline(in, line) || line != "AHTD-DATASET 1") {
    throw fail("missing or unsupported magic line");
  }
  LabeledDataset ds;
  TaskConfig& t = ds.task;
  std::string mode, ir, nr, noise;
  if (!(in >> key) || key != "task") throw fail("expected task line");
  in >> mode >> t.num_classes >> t.content_slots >> t.min_length >>
      t.num_content_tokens >> t.indicative_per_class >> t.num_neutral_tokens >>
      ir >> nr >> t.grid_side >> t.patch_side >> noise;
  if (!in) throw fail("malformed task line");
  t.mode = transformer::ParseMode(mode);
  t.indicative_rate = ParseDouble(ir);
  t.neutral_rate = ParseDouble(nr);
  t.pixel_noise = ParseDouble(noise);
  if (!(in >> key >> ds.seed) || key != "seed") throw fail("expected seed");
  if (!(in >> key >> ds.spec_fingerprint) || key != "spec") throw fail("expected spec");
  if (ds.spec_fingerprint == "-") ds.spec_fingerprint.clear();
  std::size_t count = 0;
  if (!(in >> key >> count) || key != "samples") throw fail("expected samples");
  ds.samples.resize(count);
  for (Sample& s : ds.samples) {
    std::string prov;
    std::size_t len = 0;
    if (!(in >> s.label >> prov >> len)) throw fail("truncated sample record");
    s.provenance = ParseProvenance(prov);
    if (t.mode == Mode::kSequence) {
      s.tokens.resize(len);
      for (int32_t& tok : s.tokens) in >> tok;
    } else {
      s.pixels.resize(len);
      std::string v;
      for (float& p : s.pixels) {
        in >> v;
        p = ParseFloat(v);
      }
    }
    if (!in) throw fail("truncated sample values");
  }
  return ds;
}

void SaveDataset(const LabeledDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path);
  WriteDataset(dataset, out);
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path);
}

LabeledDataset LoadDataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return ReadDataset(in);
}

}  // namespace ahtd::datasets
