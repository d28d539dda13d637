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

#include "ahtd/json_io.h"

#include <algorithm>
#include <string>

#include "ahtd/error.h"

namespace ahtd {

void RejectUnknownKeys(const Json& j, std::initializer_list<const char*> allowed,
                       std::string_view context) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kParseError,
                std::string(context) + ": expected an object");
  }
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known) {
      throw Error(ErrorCode::kParseError,
                  std::string(context) + ": unknown key '" + item.key() + "'");
    }
  }
}

Json ParseJson(std::string_view text, std::string_view context) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string(context) + ": " + e.what());
  }
}

namespace {

template <typename T>
void Get(const Json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError,
                std::string("key '") + key + "': " + e.what());
  }
}

}  // namespace

namespace transformer {

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"num_layers", c.num_layers},   {"num_heads", c.num_heads},
           {"hidden_dim", c.hidden_dim},   {"ffn_dim", c.ffn_dim},
           {"vocab_size", c.vocab_size},   {"patch_dim", c.patch_dim},
           {"max_tokens", c.max_tokens},   {"num_classes", c.num_classes},
           {"mode", ModeName(c.mode)},     {"use_class_token", c.use_class_token}};
}

void from_json(const Json& j, ModelConfig& c) {
  RejectUnknownKeys(j,
                    {"num_layers", "num_heads", "hidden_dim", "ffn_dim",
                     "vocab_size", "patch_dim", "max_tokens", "num_classes",
                     "mode", "use_class_token"},
                    "architecture");
  Get(j, "num_layers", c.num_layers);
  Get(j, "num_heads", c.num_heads);
  Get(j, "hidden_dim", c.hidden_dim);
  Get(j, "ffn_dim", c.ffn_dim);
  Get(j, "vocab_size", c.vocab_size);
  Get(j, "patch_dim", c.patch_dim);
  Get(j, "max_tokens", c.max_tokens);
  Get(j, "num_classes", c.num_classes);
  Get(j, "use_class_token", c.use_class_token);
  std::string mode;
  Get(j, "mode", mode);
  if (!mode.empty()) c.mode = ParseMode(mode);
}

void to_json(Json& j, const TrainHyper& h) {
  j = Json{{"epochs", h.epochs},
           {"batch_size", h.batch_size},
           {"learning_rate", h.learning_rate},
           {"momentum", h.momentum},
           {"seed", h.seed},
           {"accuracy_floor", h.accuracy_floor}};
}

void from_json(const Json& j, TrainHyper& h) {
  RejectUnknownKeys(j,
                    {"epochs", "batch_size", "learning_rate", "momentum", "seed",
                     "accuracy_floor"},
                    "training");
  Get(j, "epochs", h.epochs);
  Get(j, "batch_size", h.batch_size);
  Get(j, "learning_rate", h.learning_rate);
  Get(j, "momentum", h.momentum);
  Get(j, "seed", h.seed);
  Get(j, "accuracy_floor", h.accuracy_floor);
}

void to_json(Json& j, const HeadIndex& h) { j = Json::array({h.layer, h.head}); }

void from_json(const Json& j, HeadIndex& h) {
  if (!j.is_array() || j.size() != 2) {
    throw Error(ErrorCode::kParseError, "head index must be [layer, head]");
  }
  h.layer = j[0].get<int>();
  h.head = j[1].get<int>();
}

}  // namespace transformer

namespace datasets {

void to_json(Json& j, const TaskConfig& t) {
  j = Json{{"mode", transformer::ModeName(t.mode)},
           {"num_classes", t.num_classes},
           {"content_slots", t.content_slots},
           {"min_length", t.min_length},
           {"num_content_tokens", t.num_content_tokens},
           {"indicative_per_class", t.indicative_per_class},
           {"num_neutral_tokens", t.num_neutral_tokens},
           {"indicative_rate", t.indicative_rate},
           {"neutral_rate", t.neutral_rate},
           {"grid_side", t.grid_side},
           {"patch_side", t.patch_side},
           {"pixel_noise", t.pixel_noise}};
}

void from_json(const Json& j, TaskConfig& t) {
  RejectUnknownKeys(j,
                    {"mode", "num_classes", "content_slots", "min_length",
                     "num_content_tokens", "indicative_per_class",
                     "num_neutral_tokens", "indicative_rate", "neutral_rate",
                     "grid_side", "patch_side", "pixel_noise"},
                    "task");
  std::string mode;
  Get(j, "mode", mode);
  if (!mode.empty()) t.mode = transformer::ParseMode(mode);
  Get(j, "num_classes", t.num_classes);
  Get(j, "content_slots", t.content_slots);
  Get(j, "min_length", t.min_length);
  Get(j, "num_content_tokens", t.num_content_tokens);
  Get(j, "indicative_per_class", t.indicative_per_class);
  Get(j, "num_neutral_tokens", t.num_neutral_tokens);
  Get(j, "indicative_rate", t.indicative_rate);
  Get(j, "neutral_rate", t.neutral_rate);
  Get(j, "grid_side", t.grid_side);
  Get(j, "patch_side", t.patch_side);
  Get(j, "pixel_noise", t.pixel_noise);
}

void to_json(Json& j, const Perturbation& p) {
  j = Json::object();
  if (!p.tokens.empty()) {
    j["tokens"] = p.tokens;
    j["position"] = p.position;
  } else {
    j["stencil"] = p.stencil;
    j["patch_row"] = p.patch_row;
    j["patch_col"] = p.patch_col;
  }
}

void from_json(const Json& j, Perturbation& p) {
  RejectUnknownKeys(j, {"tokens", "position", "stencil", "patch_row", "patch_col"},
                    "perturbation");
  p = Perturbation{};
  Get(j, "tokens", p.tokens);
  Get(j, "position", p.position);
  Get(j, "stencil", p.stencil);
  Get(j, "patch_row", p.patch_row);
  Get(j, "patch_col", p.patch_col);
}

void to_json(Json& j, const PoisonSpec& s) {
  j = Json{{"trigger", s.trigger},
           {"pattern_id", s.pattern_id},
           {"target_class", s.target_class},
           {"poison_rate", s.poison_rate}};
}

void from_json(const Json& j, PoisonSpec& s) {
  RejectUnknownKeys(j, {"trigger", "pattern_id", "target_class", "poison_rate"},
                    "poison spec");
  Get(j, "trigger", s.trigger);
  Get(j, "pattern_id", s.pattern_id);
  Get(j, "target_class", s.target_class);
  Get(j, "poison_rate", s.poison_rate);
}

}  // namespace datasets
}  // namespace ahtd
