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
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "cupe/autograd.hpp"
#include "cupe/window.hpp"

namespace cupe::objectives {

using nn::Var;

// ---- CTC -----------------------------------------------------------------

/// Raised when no alignment of the target fits in the available frames.
class CtcInfeasible : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CtcResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d log_probs, [T, K]
};

/// Frames needed to emit target: its length plus one blank per adjacent repeat.
std::size_t ctc_min_frames(std::span<const std::size_t> target);

/// Negative log-likelihood of target under per-frame log-probabilities
/// log_probs[T, K], summed over every blank-augmented alignment. Runs the
/// forward-backward recursion in log space.
CtcResult ctc_loss(const Tensor& log_probs, std::span<const std::size_t> target, std::size_t blank);

/// Tape op wrapping ctc_loss; log_probs is [T, K].
Var ctc_loss(Var log_probs, std::span<const std::size_t> target, std::size_t blank);

// ---- silence -------------------------------------------------------------

struct SilenceMask {
  std::vector<std::uint8_t> silent;  // one flag per global frame
  double threshold_db = -40.0;

  std::size_t size() const { return silent.size(); }
};

inline constexpr double kSilenceWeight = 0.5;
inline constexpr double kSpeechWeight = 0.1;

/// Frame-averaged 0.5 * blank * M + 0.1 * blank * (1 - M).
double silence_loss(std::span<const double> blank_probs, const SilenceMask& mask);
/// Batch mean of per-item silence losses.
double silence_loss(const std::vector<std::vector<double>>& blank_probs, const std::vector<SilenceMask>& masks);
/// Differentiable form on log_probs[T, K].
Var silence_loss(Var log_probs, const SilenceMask& mask, std::size_t blank);

/// Per-frame RMS over each frame hop, compared to the loudest frame. Frames
/// past the end of the audio count as silence.
SilenceMask silence_mask_from_energy(std::span<const double> audio, std::size_t num_frames,
                                     const window::WindowConfig& cfg, double threshold_db = -40.0);

struct CombinedLoss {
  Var total;
  double ctc = 0.0;
  double silence = 0.0;
};

/// ctc + alpha_s * silence on log_probs[T, K].
CombinedLoss combined_loss(Var log_probs, std::span<const std::size_t> target, const SilenceMask& mask,
                           std::size_t blank, double alpha_s = 0.01);

// ---- masking -------------------------------------------------------------

inline constexpr double kMinMaskRatio = 0.10;
inline constexpr double kMaxMaskRatio = 0.80;

struct MaskPlan {
  std::vector<bool> masked;           // N * F_w, window-major
  std::vector<double> probability;    // selection probability per frame
  std::vector<std::size_t> boundary;  // frames forced in as acoustic boundaries
  double target_ratio = 0.0;          // after clamping to [0.10, 0.80]
  double batch_ratio = 0.0;
  std::size_t attempts = 0;

  std::size_t count() const;
};

/// Energy-weighted frame selection over energies[N, F_w]. Frames whose
/// energy jump from the previous frame is in the top decile are always
/// masked; the remaining budget is sampled with probability proportional to
/// energy + delta. Draws repeat until the batch ratio is within [0.10, 0.80].
MaskPlan select_mask(const Tensor& energies, double target_ratio, std::mt19937_64& rng, double delta = 1e-3);

// ---- vector quantizer ----------------------------------------------------

struct CodebookState {
  Tensor entries;           // [K, D]
  Tensor ema_cluster_size;  // [K]
  Tensor ema_embed_sum;     // [K, D]
  double decay = 0.99;
  double laplace_epsilon = 1e-5;

  std::size_t size() const { return entries.dim(0); }
  std::size_t dim() const { return entries.dim(1); }
};

/// Codebook starting at `entries`, each with unit EMA count.
CodebookState make_codebook(Tensor entries, double decay = 0.99, double laplace_epsilon = 1e-5);

/// Nearest entry by Euclidean distance; ties go to the lowest index.
std::vector<std::size_t> vq_assign(const Tensor& features, const CodebookState& cb);

/// EMA update of counts and sums with Laplace-smoothed counts:
/// N_i <- (N_i + eps) / (sum N + K eps) * sum N, entries <- sums / N_i.
void vq_ema_update(CodebookState& cb, const Tensor& features, std::span<const std::size_t> codes);

/// exp(entropy) of the empirical code distribution.
double code_perplexity(std::span<const std::size_t> codes, std::size_t codebook_size);

/// Mean cosine similarity over distinct pairs of codebook entries.
double codebook_similarity(const CodebookState& cb);

// ---- self-supervised objective -------------------------------------------

struct SslWeights {
  double reconstruction = 1.0;
  double contrastive = 1.0;
  double diversity = 0.1;
  double similarity = 0.05;
  double temperature = 0.1;            // InfoNCE
  double assignment_temperature = 0.1;  // soft code usage for the diversity term
  std::size_t min_negatives = 8;
  std::size_t max_negatives = 64;
};

struct SslComponents {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double diversity = 0.0;
  double similarity = 0.0;
  double total = 0.0;
  double soft_perplexity = 0.0;
  bool contrastive_skipped = false;
  std::size_t negatives = 0;
};

struct SslLoss {
  Var total;
  SslComponents parts;
};

/// Negatives drawn per positive at curriculum progress in [0, 1].
std::size_t curriculum_negatives(const SslWeights& w, double progress);

Var smooth_l1(Var pred, const Tensor& target);

/// predictions[M, D] at masked frames against their quantized targets[M, D]
/// (codes give each target's entry). assignment[M', D] are quantizer
/// outputs whose soft code usage drives the diversity term.
SslLoss ssl_loss(Var predictions, const Tensor& targets, std::span<const std::size_t> codes, Var assignment,
                 const CodebookState& cb, const SslWeights& weights, double progress, std::mt19937_64& rng);

}  // namespace cupe::objectives
