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

#include "ahtd/cli/run_config.h"

#include <fstream>
#include <sstream>

#include "ahtd/error.h"
#include "ahtd/fingerprint.h"

namespace ahtd::cli {
namespace {

template <typename T>
void Get(const Json& j, const char* key, T& out, std::string_view context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError,
                std::string(context) + "." + key + ": " + e.what());
  }
}

void Check(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidArgument, what);
}

}  // namespace

detector::FilterParams RunConfig::Filter() const {
  return filter ? *filter : detector::DefaultFilterParams(task.mode);
}

detector::DetectorConfig RunConfig::Detector() const {
  detector::DetectorConfig d;
  d.filter = Filter();
  d.features.hijack = hijack;
  d.features.dev_samples = feature_dev_samples;
  d.pool = pool;
  d.pool_seed = StageSeed(*this, SeedSalt::kPool);
  d.clean_samples = detector_clean_samples;
  d.jobs = jobs;
  return d;
}

void RunConfig::Validate() const {
  task.Validate();
  datasets::ModelConfigFor(task, zoo.architecture).Validate();
  Check(zoo.count_trojan >= 1 && zoo.count_clean >= 1,
        "a zoo needs at least one trojan and one clean model");
  Check(zoo.train_samples > 0 && zoo.eval_samples > 0, "sample counts must be positive");
  Check(zoo.hyper.epochs > 0 && zoo.hyper.batch_size > 0 && zoo.hyper.learning_rate > 0,
        "training epochs, batch_size and learning_rate must be positive");
  Check(zoo.min_clean_accuracy >= 0 && zoo.min_clean_accuracy <= 1 && zoo.min_asr >= 0 &&
            zoo.min_asr <= 1,
        "health thresholds must lie in [0, 1]");
  Check(zoo.max_attempts >= 1, "max_attempts must be at least 1");
  Check(zoo.max_failed_fraction >= 0 && zoo.max_failed_fraction <= 1,
        "max_failed_fraction must lie in [0, 1]");
  Check(hijack.alpha > 0 && hijack.alpha < 1, "hijack.alpha must lie in (0, 1)");
  Check(hijack.beta >= 0 && hijack.beta < analysis_samples,
        "hijack.beta must satisfy 0 <= beta < analysis.samples");
  Check(hijack.beta < feature_dev_samples,
        "hijack.beta must be below detector.dev_samples");
  const detector::FilterParams f = Filter();
  Check(f.gamma > 0 && f.gamma < 1, "filter.gamma must lie in (0, 1)");
  Check(f.epsilon > 0 && f.epsilon < 1, "filter.epsilon must lie in (0, 1)");
  Check(f.samples_per_class > 0, "filter.samples_per_class must be positive");
  Check(pool.phrases >= 0 && pool.random_patterns >= 0, "pool sizes must be non-negative");
  Check(detector_clean_samples >= task.num_classes,
        "detector.clean_samples must cover every class");
  Check(feature_dev_samples > 0, "detector.dev_samples must be positive");
  Check(discriminator.iterations > 0 && discriminator.learning_rate > 0 &&
            discriminator.l2 >= 0,
        "discriminator hyper-parameters out of range");
  Check(discriminator.holdout_fraction > 0 && discriminator.holdout_fraction < 1,
        "discriminator.holdout_fraction must lie in (0, 1)");
  Check(analysis_samples > 0, "analysis.samples must be positive");
  Check(cv_folds >= 2, "detector.cv_folds must be at least 2");
  for (double a : sweep_alphas) Check(a > 0 && a < 1, "sweep alphas must lie in (0, 1)");
  for (int b : sweep_betas) {
    Check(b >= 0 && b < analysis_samples && b < feature_dev_samples,
          "sweep betas must be below the analysis and dev sample counts");
  }
  Check(jobs >= 0, "jobs must be non-negative");
}

RunConfig ParseRunConfig(const Json& j) {
  RejectUnknownKeys(j,
                    {"task", "architecture", "training", "zoo", "hijack", "filter",
                     "detector", "discriminator", "analysis", "seed", "jobs",
                     "output_dir"},
                    "config");
  RunConfig c;
  if (auto it = j.find("task"); it != j.end()) c.task = it->get<datasets::TaskConfig>();
  if (auto it = j.find("architecture"); it != j.end()) {
    c.zoo.architecture = it->get<transformer::ModelConfig>();
  }
  if (auto it = j.find("training"); it != j.end()) {
    c.zoo.hyper = it->get<transformer::TrainHyper>();
  }
  if (auto it = j.find("zoo"); it != j.end()) {
    const Json& z = *it;
    RejectUnknownKeys(z,
                      {"count_trojan", "count_clean", "train_samples", "eval_samples",
                       "phrase_triggers", "min_clean_accuracy", "min_asr",
                       "max_attempts", "max_failed_fraction"},
                      "zoo");
    Get(z, "count_trojan", c.zoo.count_trojan, "zoo");
    Get(z, "count_clean", c.zoo.count_clean, "zoo");
    Get(z, "train_samples", c.zoo.train_samples, "zoo");
    Get(z, "eval_samples", c.zoo.eval_samples, "zoo");
    Get(z, "phrase_triggers", c.zoo.phrase_triggers, "zoo");
    Get(z, "min_clean_accuracy", c.zoo.min_clean_accuracy, "zoo");
    Get(z, "min_asr", c.zoo.min_asr, "zoo");
    Get(z, "max_attempts", c.zoo.max_attempts, "zoo");
    Get(z, "max_failed_fraction", c.zoo.max_failed_fraction, "zoo");
  }
  if (auto it = j.find("hijack"); it != j.end()) {
    const Json& h = *it;
    RejectUnknownKeys(h, {"alpha", "beta", "mode"}, "hijack");
    Get(h, "alpha", c.hijack.alpha, "hijack");
    Get(h, "beta", c.hijack.beta, "hijack");
    if (auto m = h.find("mode"); m != h.end()) {
      c.hijack.mode = analysis::ParseHijackMode(m->get<std::string>());
    }
  }
  if (auto it = j.find("filter"); it != j.end()) {
    const Json& f = *it;
    RejectUnknownKeys(f, {"gamma", "epsilon", "samples_per_class"}, "filter");
    detector::FilterParams p = detector::DefaultFilterParams(c.task.mode);
    Get(f, "gamma", p.gamma, "filter");
    Get(f, "epsilon", p.epsilon, "filter");
    Get(f, "samples_per_class", p.samples_per_class, "filter");
    c.filter = p;
  }
  if (auto it = j.find("detector"); it != j.end()) {
    const Json& d = *it;
    RejectUnknownKeys(d,
                      {"clean_samples", "dev_samples", "phrases", "random_patterns",
                       "cv_folds"},
                      "detector");
    Get(d, "clean_samples", c.detector_clean_samples, "detector");
    Get(d, "dev_samples", c.feature_dev_samples, "detector");
    Get(d, "phrases", c.pool.phrases, "detector");
    Get(d, "random_patterns", c.pool.random_patterns, "detector");
    Get(d, "cv_folds", c.cv_folds, "detector");
  }
  if (auto it = j.find("discriminator"); it != j.end()) {
    const Json& d = *it;
    RejectUnknownKeys(d, {"iterations", "learning_rate", "l2", "holdout_fraction"},
                      "discriminator");
    Get(d, "iterations", c.discriminator.iterations, "discriminator");
    Get(d, "learning_rate", c.discriminator.learning_rate, "discriminator");
    Get(d, "l2", c.discriminator.l2, "discriminator");
    Get(d, "holdout_fraction", c.discriminator.holdout_fraction, "discriminator");
  }
  if (auto it = j.find("analysis"); it != j.end()) {
    const Json& a = *it;
    RejectUnknownKeys(a, {"samples", "sweep_alphas", "sweep_betas"}, "analysis");
    Get(a, "samples", c.analysis_samples, "analysis");
    Get(a, "sweep_alphas", c.sweep_alphas, "analysis");
    Get(a, "sweep_betas", c.sweep_betas, "analysis");
  }
  Get(j, "seed", c.seed, "config");
  Get(j, "jobs", c.jobs, "config");
  Get(j, "output_dir", c.output_dir, "config");
  return c;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return ParseRunConfig(ParseJson(buffer.str(), path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, path + ": " + e.what());
  }
}

Json ToJson(const RunConfig& c) {
  Json j;
  j["task"] = c.task;
  j["architecture"] = c.zoo.architecture;
  j["training"] = c.zoo.hyper;
  j["zoo"] = {{"count_trojan", c.zoo.count_trojan},
              {"count_clean", c.zoo.count_clean},
              {"train_samples", c.zoo.train_samples},
              {"eval_samples", c.zoo.eval_samples},
              {"phrase_triggers", c.zoo.phrase_triggers},
              {"min_clean_accuracy", c.zoo.min_clean_accuracy},
              {"min_asr", c.zoo.min_asr},
              {"max_attempts", c.zoo.max_attempts},
              {"max_failed_fraction", c.zoo.max_failed_fraction}};
  j["hijack"] = {{"alpha", c.hijack.alpha},
                 {"beta", c.hijack.beta},
                 {"mode", analysis::HijackModeName(c.hijack.mode)}};
  const detector::FilterParams f = c.Filter();
  j["filter"] = {{"gamma", f.gamma},
                 {"epsilon", f.epsilon},
                 {"samples_per_class", f.samples_per_class}};
  j["detector"] = {{"clean_samples", c.detector_clean_samples},
                   {"dev_samples", c.feature_dev_samples},
                   {"phrases", c.pool.phrases},
                   {"random_patterns", c.pool.random_patterns},
                   {"cv_folds", c.cv_folds}};
  j["discriminator"] = {{"iterations", c.discriminator.iterations},
                        {"learning_rate", c.discriminator.learning_rate},
                        {"l2", c.discriminator.l2},
                        {"holdout_fraction", c.discriminator.holdout_fraction}};
  j["analysis"] = {{"samples", c.analysis_samples},
                   {"sweep_alphas", c.sweep_alphas},
                   {"sweep_betas", c.sweep_betas}};
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["output_dir"] = c.output_dir;
  return j;
}

uint64_t StageSeed(const RunConfig& c, SeedSalt salt) {
  if (salt == SeedSalt::kZoo) return c.seed;
  return MixSeed(c.seed, static_cast<uint64_t>(salt));
}

}  // namespace ahtd::cli
