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

// JSON conversions for configuration and spec types. Unknown keys are
// rejected so that typos in config files fail loudly; missing keys keep
// their defaults.

#ifndef AHTD_JSON_IO_H_
#define AHTD_JSON_IO_H_

#include <nlohmann/json.hpp>

#include "ahtd/datasets.h"
#include "ahtd/transformer.h"

namespace ahtd {

using Json = nlohmann::ordered_json;

namespace transformer {
void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const TrainHyper& h);
void from_json(const Json& j, TrainHyper& h);
void to_json(Json& j, const HeadIndex& h);
void from_json(const Json& j, HeadIndex& h);
}  // namespace transformer

namespace datasets {
void to_json(Json& j, const TaskConfig& t);
void from_json(const Json& j, TaskConfig& t);
void to_json(Json& j, const Perturbation& p);
void from_json(const Json& j, Perturbation& p);
void to_json(Json& j, const PoisonSpec& s);
void from_json(const Json& j, PoisonSpec& s);
}  // namespace datasets

// Throws kParseError naming the first key of `j` not in `allowed`.
void RejectUnknownKeys(const Json& j, std::initializer_list<const char*> allowed,
                       std::string_view context);

Json ParseJson(std::string_view text, std::string_view context);

}  // namespace ahtd

#endif  // AHTD_JSON_IO_H_
