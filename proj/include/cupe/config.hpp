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

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cupe/model.hpp"

namespace cupe::pipeline {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimizer and schedule shared by every training mode.
struct OptimConfig {
  double weight_decay = 0.01;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.15;
  double momentum_min = 0.8;
  double momentum_max = 0.9;
  double div_factor = 25.0;         // initial lr = peak / div_factor
  double final_div_factor = 1e4;    // final lr = initial / final_div_factor
  double grad_clip = 1.0;
};

struct SupervisedConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double alpha_s = 0.01;
  std::size_t validate_every = 200;
  double target_per = 0.0;  // stop at a validation PER below this; 0 disables
};

struct SslConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double encoder_lr = 5e-4;
  double quantizer_lr = 1e-3;
  double head_lr = 1.5e-3;
  double weight_decay = 0.05;
  double mask_ratio = 0.4;
  std::size_t codebook_size = 256;
  double codebook_decay = 0.99;
  double laplace_epsilon = 1e-5;
  double w_reconstruction = 1.0;
  double w_contrastive = 1.0;
  double w_diversity = 0.1;
  double w_similarity = 0.05;
  double temperature = 0.1;
  std::size_t min_negatives = 8;
  std::size_t max_negatives = 64;
};

struct FinetuneConfig {
  std::size_t steps = 500;
  double lr_scale = 0.1;  // of the supervised peak rate
  bool freeze_features = true;
};

struct DataConfig {
  std::string inventory;  // empty: shipped table
  std::string groups;
  bool strict = true;
  std::string fallback = "ə";
  std::string train_split = "train";
  std::string valid_split;  // empty: validate on the training split
};

struct TrainConfig {
  std::string preset = "paper";  // "paper" or "desk", applied before model overrides
  model::ModelConfig model;
  OptimConfig optim;
  SupervisedConfig train;
  SslConfig ssl;
  FinetuneConfig finetune;
  DataConfig data;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;

  void validate() const;
};

TrainConfig default_config(const std::string& preset = "paper");

/// INI text with sections [run] [model] [optim] [train] [ssl] [finetune]
/// [data]. Unknown sections or keys are errors; absent keys keep defaults.
TrainConfig parse_config(const std::string& ini);
TrainConfig load_config(const std::filesystem::path& path);

/// Every field, round-trip exact.
std::string to_ini(const TrainConfig& cfg);

/// Applies one "section.key=value" override.
void apply_override(TrainConfig& cfg, const std::string& assignment);

}  // namespace cupe::pipeline
