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

#include "cupe/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "cupe/ops.hpp"

namespace cupe::objectives {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t ctc_min_frames(std::span<const std::size_t> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

CtcResult ctc_loss(const Tensor& lp, std::span<const std::size_t> target, std::size_t blank) {
  if (lp.rank() != 2) throw ShapeError("ctc_loss expects log_probs [T, K], got " + shape_str(lp.shape()));
  const std::size_t T = lp.dim(0), K = lp.dim(1);
  if (blank >= K) throw ShapeError("ctc_loss: blank index " + std::to_string(blank) + " outside K=" + std::to_string(K));
  for (std::size_t c : target) {
    if (c >= K || c == blank) throw std::invalid_argument("ctc_loss: invalid target label " + std::to_string(c));
  }
  if (T < ctc_min_frames(target)) {
    throw CtcInfeasible("ctc_loss: target of length " + std::to_string(target.size()) + " needs " +
                        std::to_string(ctc_min_frames(target)) + " frames, got " + std::to_string(T));
  }

  // Extended labels: blank, l1, blank, l2, ..., blank.
  const std::size_t S = 2 * target.size() + 1;
  std::vector<std::size_t> ext(S, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = lp[ext[0]];
  if (S > 1) alpha[1] = lp[ext[1]];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      if (a != kNegInf) alpha[t * S + s] = a + lp[t * K + ext[s]];
    }
  }
  // beta excludes the emission at t itself.
  beta[(T - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      const double* next = beta.data() + (t + 1) * S;
      const double* em = lp.data() + (t + 1) * K;
      double b = next[s] == kNegInf ? kNegInf : next[s] + em[ext[s]];
      if (s + 1 < S && next[s + 1] != kNegInf) b = log_add(b, next[s + 1] + em[ext[s + 1]]);
      if (s + 2 < S && skip_ok(s + 2) && next[s + 2] != kNegInf) b = log_add(b, next[s + 2] + em[ext[s + 2]]);
      beta[t * S + s] = b;
    }
  }

  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[(T - 1) * S + S - 2]);
  if (log_p == kNegInf) throw CtcInfeasible("ctc_loss: target has zero probability under log_probs");

  CtcResult r;
  r.loss = -log_p;
  r.grad = Tensor({T, K});
  std::vector<double> occ(K);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    for (std::size_t s = 0; s < S; ++s) occ[ext[s]] = log_add(occ[ext[s]], alpha[t * S + s] + beta[t * S + s]);
    for (std::size_t k = 0; k < K; ++k) {
      if (occ[k] != kNegInf) r.grad[t * K + k] = -std::exp(occ[k] - log_p);
    }
  }
  return r;
}

Var ctc_loss(Var log_probs, std::span<const std::size_t> target, std::size_t blank) {
  CtcResult r = ctc_loss(log_probs.value(), target, blank);
  return log_probs.tape().record(Tensor::scalar(r.loss), {log_probs},
                                 [log_probs, grad = std::move(r.grad)](nn::Tape& t, const Tensor& g) {
                                   auto* gx = t.grad_for(log_probs);
                                   if (!gx) return;
                                   for (std::size_t i = 0; i < grad.numel(); ++i) (*gx)[i] += g[0] * grad[i];
                                 });
}

double silence_loss(std::span<const double> blank_probs, const SilenceMask& mask) {
  if (blank_probs.size() != mask.size()) {
    throw std::invalid_argument("silence_loss: " + std::to_string(blank_probs.size()) + " frames but mask has " +
                                std::to_string(mask.size()));
  }
  if (blank_probs.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < blank_probs.size(); ++t) {
    s += blank_probs[t] * (mask.silent[t] ? kSilenceWeight : kSpeechWeight);
  }
  return s / static_cast<double>(blank_probs.size());
}

double silence_loss(const std::vector<std::vector<double>>& blank_probs, const std::vector<SilenceMask>& masks) {
  if (blank_probs.size() != masks.size()) throw std::invalid_argument("silence_loss: batch size mismatch");
  if (blank_probs.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t b = 0; b < masks.size(); ++b) s += silence_loss(blank_probs[b], masks[b]);
  return s / static_cast<double>(masks.size());
}

Var silence_loss(Var log_probs, const SilenceMask& mask, std::size_t blank) {
  const std::size_t T = log_probs.dim(0), K = log_probs.dim(1);
  if (T != mask.size()) {
    throw std::invalid_argument("silence_loss: " + std::to_string(T) + " frames but mask has " +
                                std::to_string(mask.size()));
  }
  Tensor w({T, K});
  for (std::size_t t = 0; t < T; ++t) {
    w[t * K + blank] = (mask.silent[t] ? kSilenceWeight : kSpeechWeight) / static_cast<double>(T);
  }
  return nn::sum(nn::mul(nn::exp(log_probs), log_probs.tape().constant(std::move(w))));
}

SilenceMask silence_mask_from_energy(std::span<const double> audio, std::size_t num_frames,
                                     const window::WindowConfig& cfg, double threshold_db) {
  const std::size_t hop = cfg.frame_hop_samples;
  std::vector<double> rms(num_frames, 0.0);
  std::vector<bool> padded(num_frames, false);
  for (std::size_t f = 0; f < num_frames; ++f) {
    const std::size_t begin = f * hop;
    if (begin >= audio.size()) {
      padded[f] = true;
      continue;
    }
    // Samples beyond the clip are zero padding.
    double ss = 0.0;
    for (std::size_t i = begin; i < std::min(begin + hop, audio.size()); ++i) ss += audio[i] * audio[i];
    rms[f] = std::sqrt(ss / static_cast<double>(hop));
  }
  const double peak = num_frames ? *std::max_element(rms.begin(), rms.end()) : 0.0;
  const double floor = peak * std::pow(10.0, threshold_db / 20.0);
  SilenceMask m;
  m.threshold_db = threshold_db;
  m.silent.resize(num_frames);
  for (std::size_t f = 0; f < num_frames; ++f) m.silent[f] = padded[f] || peak == 0.0 || rms[f] < floor;
  return m;
}

CombinedLoss combined_loss(Var log_probs, std::span<const std::size_t> target, const SilenceMask& mask,
                           std::size_t blank, double alpha_s) {
  CombinedLoss out;
  Var ctc = ctc_loss(log_probs, target, blank);
  Var sil = silence_loss(log_probs, mask, blank);
  out.ctc = ctc.value().item();
  out.silence = sil.value().item();
  out.total = alpha_s == 0.0 ? ctc : nn::add(ctc, nn::scale(sil, alpha_s));
  return out;
}

std::size_t MaskPlan::count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }

MaskPlan select_mask(const Tensor& energies, double target_ratio, std::mt19937_64& rng, double delta) {
  if (energies.rank() != 2) throw ShapeError("select_mask expects energies [N, F], got " + shape_str(energies.shape()));
  const std::size_t N = energies.dim(0), F = energies.dim(1), M = N * F;
  for (double e : energies.values()) {
    if (!(e >= 0.0)) throw std::invalid_argument("select_mask: energies must be non-negative");
  }
  MaskPlan plan;
  plan.target_ratio = std::clamp(target_ratio, kMinMaskRatio, kMaxMaskRatio);
  plan.masked.assign(M, false);
  plan.probability.assign(M, 0.0);
  if (M == 0) return plan;
  const double budget_total = plan.target_ratio * static_cast<double>(M);

  // Acoustic boundaries: largest energy jumps within a window.
  std::vector<std::pair<double, std::size_t>> jumps;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 1; f < F; ++f) {
      const double d = std::abs(energies[n * F + f] - energies[n * F + f - 1]);
      if (d > 0.0) jumps.emplace_back(d, n * F + f);
    }
  std::sort(jumps.begin(), jumps.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const std::size_t decile = (M + 9) / 10;
  const std::size_t max_boundary = static_cast<std::size_t>(std::floor(budget_total));
  std::vector<bool> is_boundary(M, false);
  for (std::size_t i = 0; i < jumps.size() && i < decile && i < max_boundary; ++i) {
    is_boundary[jumps[i].second] = true;
    plan.boundary.push_back(jumps[i].second);
  }
  std::sort(plan.boundary.begin(), plan.boundary.end());

  double mass = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    if (!is_boundary[i]) mass += energies[i] + delta;
  }
  const double budget = budget_total - static_cast<double>(plan.boundary.size());
  for (std::size_t i = 0; i < M; ++i) {
    plan.probability[i] = is_boundary[i] ? 1.0 : std::min(1.0, budget * (energies[i] + delta) / mass);
  }

  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::ceil(kMinMaskRatio * static_cast<double>(M) - 1e-9));
  const auto hi = static_cast<std::size_t>(std::floor(kMaxMaskRatio * static_cast<double>(M) + 1e-9));
  std::size_t count = 0;
  for (plan.attempts = 1; plan.attempts <= 64; ++plan.attempts) {
    count = 0;
    for (std::size_t i = 0; i < M; ++i) {
      plan.masked[i] = is_boundary[i] || u(rng) < plan.probability[i];
      count += plan.masked[i];
    }
    if (count >= lo && count <= hi) break;
  }
  if (count < lo || count > hi) {
    // Deterministic repair: add the likeliest unmasked or drop the least
    // likely masked frames.
    std::vector<std::size_t> order(M);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return plan.probability[a] > plan.probability[b]; });
    for (std::size_t i = 0; count < lo && i < M; ++i) {
      if (!plan.masked[order[i]]) plan.masked[order[i]] = true, ++count;
    }
    for (std::size_t i = M; count > hi && i-- > 0;) {
      if (plan.masked[order[i]] && !is_boundary[order[i]]) plan.masked[order[i]] = false, --count;
    }
    plan.attempts = 64;
  }
  plan.batch_ratio = static_cast<double>(count) / static_cast<double>(M);
  return plan;
}

CodebookState make_codebook(Tensor entries, double decay, double laplace_epsilon) {
  if (entries.rank() != 2) throw ShapeError("codebook entries must be [K, D], got " + shape_str(entries.shape()));
  CodebookState cb;
  cb.ema_cluster_size = Tensor({entries.dim(0)}, 1.0);
  cb.ema_embed_sum = entries;
  cb.entries = std::move(entries);
  cb.decay = decay;
  cb.laplace_epsilon = laplace_epsilon;
  return cb;
}

std::vector<std::size_t> vq_assign(const Tensor& features, const CodebookState& cb) {
  if (features.rank() != 2 || features.dim(1) != cb.dim()) {
    throw ShapeError("vq_assign: features " + shape_str(features.shape()) + " do not match codebook dim " +
                     std::to_string(cb.dim()));
  }
  const std::size_t M = features.dim(0), K = cb.size(), D = cb.dim();
  std::vector<std::size_t> codes(M);
  for (std::size_t m = 0; m < M; ++m) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = features[m * D + j] - cb.entries[k * D + j];
        d += diff * diff;
      }
      if (d < best) best = d, codes[m] = k;
    }
  }
  return codes;
}

void vq_ema_update(CodebookState& cb, const Tensor& features, std::span<const std::size_t> codes) {
  const std::size_t K = cb.size(), D = cb.dim();
  if (features.rank() != 2 || features.dim(1) != D || features.dim(0) != codes.size()) {
    throw ShapeError("vq_ema_update: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(codes.size()) + " codes of dim " + std::to_string(D));
  }
  // With decay 1 the averages cannot move.
  if (cb.decay >= 1.0) return;
  std::vector<double> counts(K, 0.0);
  Tensor sums({K, D});
  for (std::size_t m = 0; m < codes.size(); ++m) {
    if (codes[m] >= K) throw std::out_of_range("vq_ema_update: code out of range");
    counts[codes[m]] += 1.0;
    for (std::size_t j = 0; j < D; ++j) sums[codes[m] * D + j] += features[m * D + j];
  }
  const double d = cb.decay;
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    cb.ema_cluster_size[k] = d * cb.ema_cluster_size[k] + (1.0 - d) * counts[k];
    total += cb.ema_cluster_size[k];
    for (std::size_t j = 0; j < D; ++j) {
      cb.ema_embed_sum[k * D + j] = d * cb.ema_embed_sum[k * D + j] + (1.0 - d) * sums[k * D + j];
    }
  }
  const double eps = cb.laplace_epsilon;
  for (std::size_t k = 0; k < K; ++k) {
    const double smoothed = (cb.ema_cluster_size[k] + eps) / (total + static_cast<double>(K) * eps) * total;
    for (std::size_t j = 0; j < D; ++j) cb.entries[k * D + j] = cb.ema_embed_sum[k * D + j] / smoothed;
  }
}

double code_perplexity(std::span<const std::size_t> codes, std::size_t codebook_size) {
  if (codes.empty()) return 0.0;
  std::vector<double> hist(codebook_size, 0.0);
  for (std::size_t c : codes) hist.at(c) += 1.0;
  double h = 0.0;
  for (double n : hist) {
    if (n > 0.0) {
      const double p = n / static_cast<double>(codes.size());
      h -= p * std::log(p);
    }
  }
  return std::exp(h);
}

double codebook_similarity(const CodebookState& cb) {
  const std::size_t K = cb.size(), D = cb.dim();
  if (K < 2) return 0.0;
  std::vector<double> norm(K);
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) s += cb.entries[k * D + j] * cb.entries[k * D + j];
    norm[k] = std::max(std::sqrt(s), 1e-12);
  }
  double total = 0.0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < D; ++j) dot += cb.entries[a * D + j] * cb.entries[b * D + j];
      total += dot / (norm[a] * norm[b]);
    }
  return total / static_cast<double>(K * (K - 1) / 2);
}

std::size_t curriculum_negatives(const SslWeights& w, double progress) {
  const double p = std::clamp(progress, 0.0, 1.0);
  return static_cast<std::size_t>(std::lround(static_cast<double>(w.min_negatives) +
                                              p * static_cast<double>(w.max_negatives - w.min_negatives)));
}

Var smooth_l1(Var pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = target.numel();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::abs(pred.value()[i] - target[i]);
    loss += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  loss /= static_cast<double>(std::max<std::size_t>(n, 1));
  return pred.tape().record(Tensor::scalar(loss), {pred}, [pred, target, n](nn::Tape& t, const Tensor& g) {
    auto* gx = t.grad_for(pred);
    if (!gx) return;
    const Tensor& p = t.value(pred);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = p[i] - target[i];
      (*gx)[i] += g[0] * std::clamp(d, -1.0, 1.0) / static_cast<double>(n);
    }
  });
}

SslLoss ssl_loss(Var pred, const Tensor& targets, std::span<const std::size_t> codes, Var assignment,
                 const CodebookState& cb, const SslWeights& w, double progress, std::mt19937_64& rng) {
  nn::Tape& tape = pred.tape();
  const std::size_t M = pred.dim(0), D = pred.dim(1), K = cb.size();
  if (codes.size() != M) throw ShapeError("ssl_loss: one code per prediction required");
  SslLoss out;
  auto& parts = out.parts;

  Var rec = smooth_l1(pred, targets);
  parts.reconstruction = rec.value().item();
  Var total = nn::scale(rec, w.reconstruction);

  // InfoNCE over cosine similarities; negatives are targets of other masked
  // frames carrying a different code.
  const std::size_t want = curriculum_negatives(w, progress);
  Tensor bias({M, M}, -1e30), select({M, M});
  std::size_t rows = 0, negatives = 0;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < M; ++i) {
    pool.clear();
    for (std::size_t j = 0; j < M; ++j) {
      if (j != i && codes[j] != codes[i]) pool.push_back(j);
    }
    if (pool.empty()) continue;
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t take = std::min(want, pool.size());
    for (std::size_t q = 0; q < take; ++q) bias[i * M + pool[q]] = 0.0;
    bias[i * M + i] = 0.0;
    select[i * M + i] = 1.0;
    negatives += take;
    ++rows;
  }
  if (rows == 0) {
    parts.contrastive_skipped = true;
  } else {
    Tensor unit_t({D, M});
    for (std::size_t m = 0; m < M; ++m) {
      double s = 0.0;
      for (std::size_t j = 0; j < D; ++j) s += targets[m * D + j] * targets[m * D + j];
      const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
      for (std::size_t j = 0; j < D; ++j) unit_t[j * M + m] = targets[m * D + j] * inv;
    }
    Var sim = nn::scale(nn::matmul(nn::l2_normalize(pred), tape.constant(std::move(unit_t))), 1.0 / w.temperature);
    Var lsm = nn::log_softmax(nn::add(sim, tape.constant(std::move(bias))));
    Var con = nn::scale(nn::sum(nn::mul(lsm, tape.constant(std::move(select)))), -1.0 / static_cast<double>(rows));
    parts.contrastive = con.value().item();
    parts.negatives = negatives / rows;
    total = nn::add(total, nn::scale(con, w.contrastive));
  }

  // Soft code usage: softmax(-(|z - e|^2 - |z|^2) / tau) over the codebook.
  if (assignment.valid() && assignment.dim(0) > 0) {
    Tensor et({D, K}), e2({K});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < D; ++j) {
        et[j * K + k] = cb.entries[k * D + j];
        e2[k] -= cb.entries[k * D + j] * cb.entries[k * D + j] / w.assignment_temperature;
      }
    Var logits = nn::add(nn::scale(nn::matmul(assignment, tape.constant(std::move(et))), 2.0 / w.assignment_temperature),
                         tape.constant(std::move(e2)));
    Var usage = nn::mean_axis(nn::softmax(logits), 0, false);
    Var entropy = nn::scale(nn::sum(nn::mul(usage, nn::log(usage))), -1.0);
    Var perplexity = nn::exp(entropy);
    Var div = nn::sub(tape.constant(Tensor::scalar(1.0)), nn::scale(perplexity, 1.0 / static_cast<double>(K)));
    parts.soft_perplexity = perplexity.value().item();
    parts.diversity = div.value().item();
    total = nn::add(total, nn::scale(div, w.diversity));
  }

  // The codebook moves by EMA only, so this term is reported but carries no
  // gradient.
  parts.similarity = codebook_similarity(cb);
  total = nn::add(total, tape.constant(Tensor::scalar(w.similarity * parts.similarity)));
  parts.total = total.value().item();
  out.total = total;
  return out;
}

}  // namespace cupe::objectives
