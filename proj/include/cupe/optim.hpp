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

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "cupe/autograd.hpp"
#include "cupe/checkpoint.hpp"
#include "cupe/config.hpp"
#include "cupe/layers.hpp"

namespace cupe::pipeline {

/// One-cycle policy with cosine annealing. The rate climbs from
/// peak/div_factor to peak over the first round(warmup * total) steps and
/// anneals to initial/final_div_factor by the last step; momentum moves
/// from max to min and back.
class OneCycle {
 public:
  OneCycle(std::size_t total_steps, const OptimConfig& cfg);

  /// Fraction of the peak rate at step s (0-based).
  double lr_factor(std::size_t s) const;
  double momentum(std::size_t s) const;
  std::size_t warmup_steps() const { return warmup_; }
  std::size_t total_steps() const { return total_; }

 private:
  double phase(std::size_t s, double start, double end_warm, double end) const;

  std::size_t total_;
  std::size_t warmup_;
  OptimConfig cfg_;
};

struct ParamGroup {
  std::string name;
  nn::ParamList params;
  double peak_lr = 0.0;
  double weight_decay = 0.0;
};

/// AdamW with per-group peak rates. Decoupled weight decay applies to
/// tensors of rank >= 2; biases, norms and embeddings are exempt.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, const OptimConfig& cfg, std::size_t total_steps);

  /// Applies one update from the accumulated gradients. Returns per-group
  /// learning rates used.
  std::vector<double> step();
  void zero_grad();
  std::size_t steps_taken() const { return step_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  const OneCycle& schedule() const { return schedule_; }

  void save(model::Checkpoint& ckpt) const;
  /// Restores moments for parameters present in ckpt; others start at zero.
  void load(const model::Checkpoint& ckpt);

 private:
  struct Moments {
    Tensor m, v;
  };
  std::vector<ParamGroup> groups_;
  OptimConfig cfg_;
  OneCycle schedule_;
  std::size_t step_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

/// Global L2 norm of the gradients of params.
double grad_norm(const nn::ParamList& params);

/// Scales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
double clip_grad_norm(const nn::ParamList& params, double max_norm);

}  // namespace cupe::pipeline
