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

#ifndef AHTD_CLI_RUN_CONFIG_H_
#define AHTD_CLI_RUN_CONFIG_H_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ahtd/analysis.h"
#include "ahtd/datasets.h"
#include "ahtd/detector.h"
#include "ahtd/json_io.h"
#include "ahtd/zoo.h"

namespace ahtd::cli {

// One experiment recipe. Loaded from a JSON file; flags override fields
// after loading, then Validate() runs before any work starts.
struct RunConfig {
  datasets::TaskConfig task;
  zoo::ZooOptions zoo;  // architecture and hyper live here
  analysis::HijackParams hijack;
  std::optional<detector::FilterParams> filter;  // mode default when absent
  detector::PoolOptions pool;
  int detector_clean_samples = 80;
  int feature_dev_samples = 40;
  detector::DiscriminatorHyper discriminator;
  int analysis_samples = 40;
  int cv_folds = 5;
  std::vector<double> sweep_alphas = {0.3, 0.5, 0.7, 0.9};
  std::vector<int> sweep_betas = {5, 10, 15};
  uint64_t seed = 0;
  int jobs = 1;
  std::string output_dir;

  detector::FilterParams Filter() const;
  detector::DetectorConfig Detector() const;

  // Throws kInvalidArgument (or the module's own code) on the first bad field.
  void Validate() const;
};

RunConfig ParseRunConfig(const Json& j);
RunConfig LoadRunConfig(const std::string& path);
Json ToJson(const RunConfig& c);

// Seeds for the pipeline stages, all derived from RunConfig::seed.
enum class SeedSalt : uint64_t {
  kZoo = 0,
  kPool = 0x9001,
  kDefender = 0x9002,
  kDiscriminator = 0x9003,
  kFolds = 0x9004,
};
uint64_t StageSeed(const RunConfig& c, SeedSalt salt);

}  // namespace ahtd::cli

#endif  // AHTD_CLI_RUN_CONFIG_H_
