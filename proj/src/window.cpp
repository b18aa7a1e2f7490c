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

#include "cupe/window.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cupe::window {

void WindowConfig::validate() const {
  if (sample_rate == 0 || window_samples == 0 || stride_samples == 0 || frame_hop_samples == 0) {
    throw std::invalid_argument("window config values must be positive");
  }
  if (stride_samples > window_samples) {
    throw std::invalid_argument("window stride " + std::to_string(stride_samples) + " exceeds window size " +
                                std::to_string(window_samples));
  }
}

std::array<std::size_t, 4> stage_lengths(std::size_t samples) {
  std::array<std::size_t, 4> lengths{};
  std::size_t len = samples;
  for (std::size_t i = 0; i < kFeatureStages.size(); ++i) {
    const auto& st = kFeatureStages[i];
    len = nn::conv_out_length(len, st.kernel, nn::ConvSpec{st.stride, st.padding, 1});
    lengths[i] = len;
  }
  return lengths;
}

std::size_t frames_per_window(const WindowConfig& cfg) { return stage_lengths(cfg.window_samples).back(); }

WindowBatch slice(const Tensor& audio, const WindowConfig& cfg) {
  cfg.validate();
  std::size_t items = 1;
  std::size_t length = 0;
  if (audio.rank() == 1) {
    length = audio.dim(0);
  } else if (audio.rank() == 2) {
    items = audio.dim(0);
    length = audio.dim(1);
  } else {
    throw ShapeError("slice expects audio [B, T] or [T], got " + shape_str(audio.shape()));
  }
  if (length == 0 || items == 0) throw std::invalid_argument("slice: empty audio");

  const std::size_t W = cfg.window_samples;
  const std::size_t s = cfg.stride_samples;
  std::size_t n = 1;
  if (length > W) n = (length - W + s - 1) / s + 1;
  const std::size_t padded = (n - 1) * s + W;

  WindowBatch batch;
  batch.items = items;
  batch.source_length = length;
  batch.pad_amount = padded - length;
  batch.offsets.resize(n);
  for (std::size_t i = 0; i < n; ++i) batch.offsets[i] = i * s;
  batch.windows = Tensor(Shape{items * n, W});
  for (std::size_t b = 0; b < items; ++b) {
    const double* src = audio.data() + b * length;
    for (std::size_t i = 0; i < n; ++i) {
      double* dst = batch.windows.data() + (b * n + i) * W;
      const std::size_t start = batch.offsets[i];
      const std::size_t avail = start < length ? std::min(W, length - start) : 0;
      std::copy_n(src + start, avail, dst);
    }
  }
  return batch;
}

WindowBatch slice(std::span<const double> audio, const WindowConfig& cfg) {
  return slice(Tensor(Shape{audio.size()}, std::vector<double>(audio.begin(), audio.end())), cfg);
}

double cosine_weight(double t, std::size_t frames_per_window) {
  const double w = std::cos(std::numbers::pi * t / static_cast<double>(frames_per_window) - std::numbers::pi / 2.0);
  return std::max(w, 1e-6);
}

StitchPlan make_stitch_plan(std::size_t num_windows, std::size_t frames_per_window, const WindowBatch& batch,
                            const WindowConfig& cfg) {
  if (num_windows == 0) throw std::invalid_argument("stitch: no windows");
  if (num_windows != batch.offsets.size()) {
    throw ShapeError("stitch: " + std::to_string(num_windows) + " windows but batch has " +
                     std::to_string(batch.offsets.size()) + " offsets");
  }
  const double hop = static_cast<double>(cfg.frame_hop_samples);
  const auto by_extent = static_cast<std::size_t>(
      std::llround(static_cast<double>(batch.offsets.back() + cfg.window_samples) / hop));
  const std::size_t by_source = (batch.source_length + cfg.frame_hop_samples - 1) / cfg.frame_hop_samples;

  StitchPlan plan;
  plan.frames_per_window = frames_per_window;
  plan.global_frames = std::min(by_extent, by_source);
  plan.weight_mass.assign(plan.global_frames, 0.0);
  for (std::size_t k = 0; k < num_windows; ++k) {
    for (std::size_t t = 0; t < frames_per_window; ++t) {
      const double pos = static_cast<double>(batch.offsets[k]) + static_cast<double>(t) * hop;
      const auto g = static_cast<std::size_t>(std::llround(pos / hop));
      if (g >= plan.global_frames) continue;
      const double w = cosine_weight(static_cast<double>(t), frames_per_window);
      plan.deposits.push_back({k, t, g, w});
      plan.weight_mass[g] += w;
    }
  }
  for (std::size_t g = 0; g < plan.global_frames; ++g) {
    if (!(plan.weight_mass[g] > 0.0)) {
      throw std::invalid_argument("stitch: global frame " + std::to_string(g) + " receives no window frame");
    }
  }
  return plan;
}

namespace {

// Weighted average per global frame: sum w * y / (sum w + eps).
Tensor weighted_average(const Tensor& per_window, const StitchPlan& plan) {
  const std::size_t classes = per_window.dim(2);
  const std::size_t fw = per_window.dim(1);
  Tensor out(Shape{plan.global_frames, classes});
  for (const auto& d : plan.deposits) {
    const double* src = per_window.data() + (d.window * fw + d.frame) * classes;
    double* dst = out.data() + d.global * classes;
    for (std::size_t c = 0; c < classes; ++c) dst[c] += d.weight * src[c];
  }
  for (std::size_t g = 0; g < plan.global_frames; ++g) {
    const double denom = plan.weight_mass[g] + kStitchEpsilon;
    for (std::size_t c = 0; c < classes; ++c) out[g * classes + c] /= denom;
  }
  return out;
}

void check_per_window(const Tensor& per_window, const StitchPlan& plan) {
  if (per_window.rank() != 3 || per_window.dim(1) != plan.frames_per_window) {
    throw ShapeError("stitch expects [N, " + std::to_string(plan.frames_per_window) + ", C+1], got " +
                     shape_str(per_window.shape()));
  }
}

}  // namespace

StitchedPosteriors stitch(const Tensor& per_window, const WindowBatch& batch, const WindowConfig& cfg,
                          StitchMode mode) {
  if (per_window.rank() != 3) {
    throw ShapeError("stitch expects [N, F_w, C+1], got " + shape_str(per_window.shape()));
  }
  const StitchPlan plan = make_stitch_plan(per_window.dim(0), per_window.dim(1), batch, cfg);
  check_per_window(per_window, plan);
  const std::size_t classes = per_window.dim(2);
  Tensor avg = weighted_average(per_window, plan);
  for (std::size_t g = 0; g < plan.global_frames; ++g) {
    double* row = avg.data() + g * classes;
    if (mode == StitchMode::kLogits) {
      const double mx = *std::max_element(row, row + classes);
      for (std::size_t c = 0; c < classes; ++c) row[c] = std::exp(row[c] - mx);
    }
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += row[c];
    for (std::size_t c = 0; c < classes; ++c) row[c] /= s;
  }
  return StitchedPosteriors{std::move(avg), cfg.frame_hop_seconds(), plan.weight_mass};
}

nn::Var stitch(nn::Var per_window, const StitchPlan& plan) {
  check_per_window(per_window.value(), plan);
  const std::size_t classes = per_window.dim(2);
  const std::size_t fw = plan.frames_per_window;
  Tensor avg = weighted_average(per_window.value(), plan);
  std::vector<double> row_sum(plan.global_frames);
  Tensor out = avg;
  for (std::size_t g = 0; g < plan.global_frames; ++g) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += avg[g * classes + c];
    row_sum[g] = s;
    for (std::size_t c = 0; c < classes; ++c) out[g * classes + c] /= s;
  }
  const std::size_t self = per_window.tape().size();
  return per_window.tape().record(
      std::move(out), {per_window},
      [per_window, plan, classes, fw, self, row_sum = std::move(row_sum)](nn::Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_for(per_window);
        if (!gx) return;
        const Tensor& y = t.value(self);
        // d/d avg of avg / sum(avg)
        Tensor g_avg(Shape{plan.global_frames, classes});
        for (std::size_t f = 0; f < plan.global_frames; ++f) {
          double dot = 0.0;
          for (std::size_t c = 0; c < classes; ++c) dot += g[f * classes + c] * y[f * classes + c];
          const double denom = plan.weight_mass[f] + kStitchEpsilon;
          for (std::size_t c = 0; c < classes; ++c) {
            g_avg[f * classes + c] = (g[f * classes + c] - dot) / row_sum[f] / denom;
          }
        }
        for (const auto& d : plan.deposits) {
          double* dst = gx->data() + (d.window * fw + d.frame) * classes;
          const double* src = g_avg.data() + d.global * classes;
          for (std::size_t c = 0; c < classes; ++c) dst[c] += d.weight * src[c];
        }
      });
}

}  // namespace cupe::window
