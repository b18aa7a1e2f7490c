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

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "cupe/autograd.hpp"
#include "cupe/ops.hpp"

namespace cupe::window {

/// Kernel/stride/padding of the four strided feature-extractor convolutions.
struct StageGeometry {
  std::size_t kernel;
  std::size_t stride;
  std::size_t padding;
};
inline constexpr std::array<StageGeometry, 4> kFeatureStages{{{15, 7, 7}, {11, 5, 5}, {7, 3, 3}, {5, 2, 2}}};

struct WindowConfig {
  std::size_t sample_rate = 16000;
  std::size_t window_samples = 1920;  // 120 ms
  std::size_t stride_samples = 1280;  // 80 ms
  std::size_t frame_hop_samples = 210;  // 7 * 5 * 3 * 2

  void validate() const;
  double frame_hop_seconds() const {
    return static_cast<double>(frame_hop_samples) / static_cast<double>(sample_rate);
  }
};

/// Output length of every feature stage for a window of `samples`.
std::array<std::size_t, 4> stage_lengths(std::size_t samples);

/// Frames emitted per window (length after the last feature stage).
std::size_t frames_per_window(const WindowConfig& cfg);

struct WindowBatch {
  Tensor windows;                    // [items * N, W], item-major
  std::vector<std::size_t> offsets;  // N global sample offsets, offsets[i] = i * stride
  std::size_t items = 1;             // leading batch axis of the source audio
  std::size_t source_length = 0;     // T, in samples
  std::size_t pad_amount = 0;        // zeros appended to reach offsets[N-1] + W

  std::size_t windows_per_item() const { return offsets.size(); }
};

/// audio is [B, T] (or [T] for a single clip).
WindowBatch slice(const Tensor& audio, const WindowConfig& cfg);
WindowBatch slice(std::span<const double> audio, const WindowConfig& cfg);

/// cos(pi t / F_w - pi / 2), clamped below at 1e-6.
double cosine_weight(double t, std::size_t frames_per_window);

inline constexpr double kStitchEpsilon = 1e-8;

/// Where each window frame lands on the global frame grid.
struct StitchPlan {
  struct Deposit {
    std::size_t window;
    std::size_t frame;
    std::size_t global;
    double weight;
  };
  std::vector<Deposit> deposits;
  std::vector<double> weight_mass;  // per global frame
  std::size_t frames_per_window = 0;
  std::size_t global_frames = 0;
};

StitchPlan make_stitch_plan(std::size_t num_windows, std::size_t frames_per_window, const WindowBatch& batch,
                            const WindowConfig& cfg);

struct StitchedPosteriors {
  Tensor frames;  // [T_f, C + 1], rows sum to 1
  double frame_hop = 0.0;
  std::vector<double> weight_mass;

  std::size_t num_frames() const { return frames.empty() ? 0 : frames.dim(0); }
  std::size_t num_classes() const { return frames.empty() ? 0 : frames.dim(1); }
};

enum class StitchMode {
  kProbabilities,  // average probabilities, renormalize
  kLogits,         // average logits, then softmax
};

/// per_window is [N, F_w, C + 1] for one item of the batch.
StitchedPosteriors stitch(const Tensor& per_window, const WindowBatch& batch, const WindowConfig& cfg,
                          StitchMode mode = StitchMode::kProbabilities);

/// Differentiable probability stitching of per_window [N, F_w, C + 1].
nn::Var stitch(nn::Var per_window, const StitchPlan& plan);

}  // namespace cupe::window
