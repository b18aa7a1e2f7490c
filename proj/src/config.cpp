// Copyright 2026 The CUPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cupe/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cupe::pipeline {

namespace {

std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string format(std::size_t v) { return std::to_string(v); }
std::string format(std::uint64_t v, int) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string& key, const std::string&)> set;
};

#define CUPE_FIELD(path, member, kind)                                                          \
  {                                                                                             \
    path, Field {                                                                               \
      [](const TrainConfig& c) { return format(c.member); },                                   \
          [](TrainConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.member = kind; } \
    }                                                                                           \
  }
#define NUM(path, member) CUPE_FIELD(path, member, parse_number<decltype(c.member)>(k, v))
#define BOOL(path, member) CUPE_FIELD(path, member, parse_bool(k, v))
#define STR(path, member) CUPE_FIELD(path, member, v)

// Ordered by section for to_ini output.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"run.preset",
       {[](const TrainConfig& c) { return c.preset; },
        [](TrainConfig& c, const std::string&, const std::string& v) {
          const auto fresh = default_config(v);
          c.preset = fresh.preset;
          c.model = fresh.model;
        }}},
      {"run.seed",
       {[](const TrainConfig& c) { return format(c.seed, 0); },
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); }}},
      NUM("run.log_every", log_every),
      NUM("model.base_channels", model.base_channels),
      NUM("model.model_dim", model.model_dim),
      NUM("model.transformer_layers", model.transformer_layers),
      NUM("model.heads", model.heads),
      NUM("model.ffn_dim", model.ffn_dim),
      NUM("model.transformer_dropout", model.transformer_dropout),
      NUM("model.conv_dropout", model.conv_dropout),
      NUM("model.stream_groups", model.stream_groups),
      NUM("model.attention_reduction", model.attention_reduction),
      NUM("model.classifier_hidden", model.classifier_hidden),
      NUM("model.classifier_dropout", model.classifier_dropout),
      NUM("model.projection_hidden", model.projection_hidden),
      NUM("model.projection_dim", model.projection_dim),
      NUM("model.projection_dropout", model.projection_dropout),
      NUM("model.num_classes", model.num_classes),
      NUM("model.window_samples", model.window.window_samples),
      NUM("model.stride_samples", model.window.stride_samples),
      NUM("optim.weight_decay", optim.weight_decay),
      NUM("optim.beta2", optim.beta2),
      NUM("optim.eps", optim.eps),
      NUM("optim.warmup_fraction", optim.warmup_fraction),
      NUM("optim.momentum_min", optim.momentum_min),
      NUM("optim.momentum_max", optim.momentum_max),
      NUM("optim.div_factor", optim.div_factor),
      NUM("optim.final_div_factor", optim.final_div_factor),
      NUM("optim.grad_clip", optim.grad_clip),
      NUM("train.steps", train.steps),
      NUM("train.batch_size", train.batch_size),
      NUM("train.lr", train.lr),
      NUM("train.alpha_s", train.alpha_s),
      NUM("train.validate_every", train.validate_every),
      NUM("train.target_per", train.target_per),
      NUM("ssl.steps", ssl.steps),
      NUM("ssl.batch_size", ssl.batch_size),
      NUM("ssl.encoder_lr", ssl.encoder_lr),
      NUM("ssl.quantizer_lr", ssl.quantizer_lr),
      NUM("ssl.head_lr", ssl.head_lr),
      NUM("ssl.weight_decay", ssl.weight_decay),
      NUM("ssl.mask_ratio", ssl.mask_ratio),
      NUM("ssl.codebook_size", ssl.codebook_size),
      NUM("ssl.codebook_decay", ssl.codebook_decay),
      NUM("ssl.laplace_epsilon", ssl.laplace_epsilon),
      NUM("ssl.w_reconstruction", ssl.w_reconstruction),
      NUM("ssl.w_contrastive", ssl.w_contrastive),
      NUM("ssl.w_diversity", ssl.w_diversity),
      NUM("ssl.w_similarity", ssl.w_similarity),
      NUM("ssl.temperature", ssl.temperature),
      NUM("ssl.min_negatives", ssl.min_negatives),
      NUM("ssl.max_negatives", ssl.max_negatives),
      NUM("finetune.steps", finetune.steps),
      NUM("finetune.lr_scale", finetune.lr_scale),
      BOOL("finetune.freeze_features", finetune.freeze_features),
      STR("data.inventory", data.inventory),
      STR("data.groups", data.groups),
      BOOL("data.strict", data.strict),
      STR("data.fallback", data.fallback),
      STR("data.train_split", data.train_split),
      STR("data.valid_split", data.valid_split),
  };
  return table;
}

#undef NUM
#undef BOOL
#undef STR
#undef CUPE_FIELD

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void TrainConfig::validate() const {
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  check(optim.warmup_fraction > 0.0 && optim.warmup_fraction < 1.0, "optim.warmup_fraction must lie in (0, 1)");
  check(optim.grad_clip > 0.0, "optim.grad_clip must be positive");
  check(optim.momentum_min > 0.0 && optim.momentum_min <= optim.momentum_max && optim.momentum_max < 1.0,
        "optim momentum range must satisfy 0 < min <= max < 1");
  check(optim.beta2 > 0.0 && optim.beta2 < 1.0, "optim.beta2 must lie in (0, 1)");
  check(optim.eps > 0.0 && optim.div_factor >= 1.0 && optim.final_div_factor >= 1.0, "optim eps/div factors invalid");
  check(train.batch_size > 0 && ssl.batch_size > 0, "batch sizes must be positive");
  check(train.lr > 0.0 && ssl.encoder_lr > 0.0 && ssl.quantizer_lr > 0.0 && ssl.head_lr > 0.0,
        "learning rates must be positive");
  check(train.alpha_s >= 0.0, "train.alpha_s must be non-negative");
  check(ssl.mask_ratio > 0.0 && ssl.mask_ratio < 1.0, "ssl.mask_ratio must lie in (0, 1)");
  check(ssl.codebook_size >= 2, "ssl.codebook_size must be at least 2");
  check(ssl.codebook_decay >= 0.0 && ssl.codebook_decay <= 1.0, "ssl.codebook_decay must lie in [0, 1]");
  check(ssl.temperature > 0.0 && ssl.min_negatives <= ssl.max_negatives, "ssl contrastive settings invalid");
  check(finetune.lr_scale > 0.0, "finetune.lr_scale must be positive");
  check(log_every > 0, "run.log_every must be positive");
}

TrainConfig default_config(const std::string& preset) {
  TrainConfig c;
  if (preset == "desk") {
    c.model = model::ModelConfig::desk();
  } else if (preset != "paper") {
    throw ConfigError("unknown preset '" + preset + "' (expected paper or desk)");
  }
  c.preset = preset;
  return c;
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  field(key).set(cfg, key, value);
}

TrainConfig parse_config(const std::string& ini) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(ini);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  TrainConfig cfg = default_config(tree.get<std::string>("run.preset", "paper"));
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string path = section + "." + key;
      if (path == "run.preset") continue;
      field(path).set(cfg, path, value.data());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_ini(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [path, f] : fields()) {
    const auto dot = path.find('.');
    const std::string sec = path.substr(0, dot);
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    out << path.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

}  // namespace cupe::pipeline
