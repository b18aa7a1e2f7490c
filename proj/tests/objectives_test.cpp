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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "cupe/gradcheck.hpp"
#include "cupe/objectives.hpp"

using namespace cupe;
using namespace cupe::objectives;

namespace {

Tensor random_log_probs(std::size_t T, std::size_t K, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor lp({T, K});
  for (std::size_t t = 0; t < T; ++t) {
    double m = -1e300;
    for (std::size_t k = 0; k < K; ++k) m = std::max(m, lp[t * K + k] = 2.0 * nd(rng));
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(lp[t * K + k] - m);
    for (std::size_t k = 0; k < K; ++k) lp[t * K + k] -= m + std::log(s);
  }
  return lp;
}

// Enumerates every frame labelling, keeps those that collapse to target.
double brute_force_ctc(const Tensor& lp, const std::vector<std::size_t>& target, std::size_t blank) {
  const std::size_t T = lp.dim(0), K = lp.dim(1);
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    std::vector<std::size_t> collapsed;
    std::size_t prev = K;
    for (std::size_t c : path) {
      if (c != prev && c != blank) collapsed.push_back(c);
      prev = c;
    }
    if (collapsed == target) {
      double lpath = 0.0;
      for (std::size_t t = 0; t < T; ++t) lpath += lp[t * K + path[t]];
      total += std::exp(lpath);
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == K) path[t++] = 0;
    if (t == T) break;
  }
  return -std::log(total);
}

SilenceMask mask_of(std::vector<std::uint8_t> flags) { return SilenceMask{std::move(flags), -40.0}; }

}  // namespace

TEST(Ctc, SingleFrameSingleLabel) {
  Tensor lp({1, 3}, std::log(1.0 / 3.0));
  const std::vector<std::size_t> target{0};
  EXPECT_NEAR(ctc_loss(lp, target, 2).loss, std::log(3.0), 1e-12);
}

TEST(Ctc, TwoFramesThreePaths) {
  Tensor lp({2, 3}, std::log(1.0 / 3.0));
  const std::vector<std::size_t> target{0};
  EXPECT_NEAR(ctc_loss(lp, target, 2).loss, std::log(3.0), 1e-12);
}

TEST(Ctc, EmptyTargetIsAllBlank) {
  std::mt19937_64 rng(1);
  const Tensor lp = random_log_probs(5, 4, rng);
  double expected = 0.0;
  for (std::size_t t = 0; t < 5; ++t) expected -= lp[t * 4 + 3];
  EXPECT_NEAR(ctc_loss(lp, {}, 3).loss, expected, 1e-12);
}

TEST(Ctc, InfeasibleTargetIsAnError) {
  Tensor lp({2, 3}, std::log(1.0 / 3.0));
  const std::vector<std::size_t> repeat{0, 0};
  const std::vector<std::size_t> three{0, 1, 0};
  EXPECT_EQ(ctc_min_frames(repeat), 3u);
  EXPECT_THROW(ctc_loss(lp, repeat, 2), CtcInfeasible);
  EXPECT_THROW(ctc_loss(lp, three, 2), CtcInfeasible);
  const std::vector<std::size_t> with_blank{2};
  EXPECT_THROW(ctc_loss(lp, with_blank, 2), std::invalid_argument);
}

TEST(Ctc, MatchesBruteForceExhaustively) {
  std::mt19937_64 rng(2);
  std::size_t cases = 0;
  for (std::size_t C = 1; C <= 3; ++C) {
    const std::size_t K = C + 1;
    for (std::size_t T = 1; T <= 6; ++T) {
      for (std::size_t L = 0; L <= 3; ++L) {
        std::vector<std::size_t> target(L, 0);
        while (true) {
          if (ctc_min_frames(target) <= T) {
            for (int rep = 0; rep < 3; ++rep) {
              const Tensor lp = random_log_probs(T, K, rng);
              ASSERT_NEAR(ctc_loss(lp, target, C).loss, brute_force_ctc(lp, target, C), 1e-8);
              ++cases;
            }
          }
          std::size_t i = 0;
          while (i < L && ++target[i] == C) target[i++] = 0;
          if (i == L) break;
        }
      }
    }
  }
  EXPECT_GE(cases, 500u);
}

TEST(Ctc, OccupanciesSumToOnePerFrame) {
  std::mt19937_64 rng(3);
  const Tensor lp = random_log_probs(8, 5, rng);
  const std::vector<std::size_t> target{1, 1, 3};
  const auto r = ctc_loss(lp, target, 4);
  for (std::size_t t = 0; t < 8; ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += r.grad[t * 5 + k];
    EXPECT_NEAR(s, -1.0, 1e-10);
  }
}

TEST(Ctc, LogitGradientSumsToZeroAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const std::vector<std::size_t> target{0, 2, 2};
  auto fn = [&](nn::Tape&, const std::vector<nn::Var>& in) { return ctc_loss(nn::log_softmax(in[0]), target, 3); };
  std::normal_distribution<double> nd;
  Tensor logits({7, 4});
  for (auto& v : logits.values()) v = nd(rng);
  EXPECT_LT(nn::grad_check(fn, {logits}).max_relative_error, 1e-4);

  nn::Tape tape;
  nn::Var x = tape.leaf(logits);
  tape.backward(fn(tape, {x}));
  const Tensor g = tape.grad(x);
  for (std::size_t t = 0; t < 7; ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += g[t * 4 + k];
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
}

TEST(Silence, ClosedForms) {
  const std::vector<double> ones(6, 1.0), halves(6, 0.5);
  EXPECT_NEAR(silence_loss(ones, mask_of({1, 1, 1, 1, 1, 1})), 0.5, 1e-12);
  EXPECT_NEAR(silence_loss(ones, mask_of({0, 0, 0, 0, 0, 0})), 0.1, 1e-12);
  EXPECT_NEAR(silence_loss(halves, mask_of({1, 0, 1, 0, 1, 0})), 0.15, 1e-12);
  EXPECT_THROW(silence_loss(ones, mask_of({1, 1})), std::invalid_argument);
}

TEST(Silence, BatchMeanAndBounds) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  std::vector<std::vector<double>> probs;
  std::vector<SilenceMask> masks;
  double expected = 0.0;
  for (int b = 0; b < 4; ++b) {
    std::vector<double> p(9);
    std::vector<std::uint8_t> m(9);
    for (std::size_t t = 0; t < 9; ++t) p[t] = u(rng), m[t] = u(rng) < 0.5;
    const double l = silence_loss(p, mask_of(m));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 0.5);
    expected += l / 4.0;
    probs.push_back(p);
    masks.push_back(mask_of(m));
  }
  EXPECT_NEAR(silence_loss(probs, masks), expected, 1e-15);
}

TEST(Silence, LinearInBlankProbability) {
  const auto m = mask_of({1, 0, 0, 1});
  const std::vector<double> a{0.1, 0.2, 0.3, 0.4}, b{0.9, 0.5, 0.0, 0.2};
  std::vector<double> mix(4);
  for (int i = 0; i < 4; ++i) mix[i] = 0.3 * a[i] + 0.7 * b[i];
  EXPECT_NEAR(silence_loss(mix, m), 0.3 * silence_loss(a, m) + 0.7 * silence_loss(b, m), 1e-15);
}

TEST(Silence, TapeFormMatchesScalarForm) {
  std::mt19937_64 rng(6);
  const Tensor lp = random_log_probs(5, 3, rng);
  const auto m = mask_of({1, 0, 1, 1, 0});
  std::vector<double> blank(5);
  for (std::size_t t = 0; t < 5; ++t) blank[t] = std::exp(lp[t * 3 + 2]);
  nn::Tape tape({.record = false});
  EXPECT_NEAR(silence_loss(tape.constant(lp), m, 2).value().item(), silence_loss(blank, m), 1e-14);
}

TEST(Combined, ArithmeticAndAlphaZero) {
  std::mt19937_64 rng(7);
  const Tensor lp = random_log_probs(6, 4, rng);
  const std::vector<std::size_t> target{0, 1};
  const auto m = mask_of({1, 0, 0, 0, 0, 1});
  nn::Tape tape({.record = false});
  const auto zero = combined_loss(tape.constant(lp), target, m, 3, 0.0);
  EXPECT_EQ(zero.total.value().item(), ctc_loss(lp, target, 3).loss);
  const auto full = combined_loss(tape.constant(lp), target, m, 3, 0.01);
  EXPECT_NEAR(full.total.value().item(), full.ctc + 0.01 * full.silence, 1e-14);
  EXPECT_DOUBLE_EQ(1.0 + 0.01 * 0.5, 1.005);
}

TEST(Combined, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const std::vector<std::size_t> target{1, 0, 1};
  const auto m = mask_of({1, 1, 0, 0, 0, 0, 0, 1});
  auto fn = [&](nn::Tape&, const std::vector<nn::Var>& in) {
    return combined_loss(nn::log_softmax(in[0]), target, m, 2, 0.5).total;
  };
  std::normal_distribution<double> nd;
  Tensor logits({8, 3});
  for (auto& v : logits.values()) v = nd(rng);
  EXPECT_LT(nn::grad_check(fn, {logits}).max_relative_error, 1e-4);
}

TEST(SilenceMask, FromEnergy) {
  const window::WindowConfig cfg;
  const std::vector<double> zeros(2100, 0.0);
  const auto all = silence_mask_from_energy(zeros, 10, cfg);
  EXPECT_EQ(std::count(all.silent.begin(), all.silent.end(), 1), 10);

  std::vector<double> tone(2100);
  for (std::size_t i = 0; i < tone.size(); ++i) tone[i] = std::sin(2.0 * M_PI * 440.0 * i / 16000.0);
  const auto none = silence_mask_from_energy(tone, 10, cfg);
  EXPECT_EQ(std::count(none.silent.begin(), none.silent.end(), 1), 0);

  std::vector<double> gap(6300);
  for (std::size_t i = 0; i < gap.size(); ++i) gap[i] = (i >= 2100 && i < 4200) ? 0.0 : tone[i % 2100];
  const auto mid = silence_mask_from_energy(gap, 32, cfg);
  for (std::size_t f = 0; f < 30; ++f) EXPECT_EQ(mid.silent[f], f >= 10 && f < 20) << f;
  // Frames past the audio are padding.
  EXPECT_EQ(mid.silent[30], 1);
  EXPECT_EQ(mid.silent[31], 1);
}

TEST(Mask, TargetRatioIsClamped) {
  std::mt19937_64 rng(9);
  const Tensor e({4, 10}, 1.0);
  EXPECT_DOUBLE_EQ(select_mask(e, 0.0, rng).target_ratio, 0.10);
  EXPECT_DOUBLE_EQ(select_mask(e, 0.95, rng).target_ratio, 0.80);
}

TEST(Mask, UniformEnergiesAverageTheTarget) {
  std::mt19937_64 rng(10);
  const Tensor e({4, 10}, 0.3);
  double sum = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto plan = select_mask(e, 0.40, rng);
    EXPECT_GE(plan.batch_ratio, kMinMaskRatio);
    EXPECT_LE(plan.batch_ratio, kMaxMaskRatio);
    EXPECT_TRUE(plan.boundary.empty());
    sum += plan.batch_ratio;
  }
  EXPECT_NEAR(sum / 1000.0, 0.40, 0.04);
}

TEST(Mask, LoudFrameIsLikeliest) {
  std::mt19937_64 rng(11);
  Tensor e({1, 10}, 0.01);
  e[6] = 5.0;
  const auto plan = select_mask(e, 0.40, rng);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_LE(plan.probability[i], plan.probability[6]);
  EXPECT_TRUE(plan.masked[6]);
}

TEST(Mask, RandomEnergiesAlwaysRespectBatchBounds) {
  std::mt19937_64 rng(12);
  std::exponential_distribution<double> ex(1.0);
  std::uniform_int_distribution<std::size_t> nd(1, 6);
  for (int i = 0; i < 300; ++i) {
    Tensor e({nd(rng), 10});
    for (auto& v : e.values()) v = ex(rng);
    const auto plan = select_mask(e, (i % 10) / 10.0, rng);
    EXPECT_GE(plan.batch_ratio, kMinMaskRatio);
    EXPECT_LE(plan.batch_ratio, kMaxMaskRatio);
    for (std::size_t b : plan.boundary) EXPECT_TRUE(plan.masked[b]);
  }
}

TEST(Vq, AssignNearestWithLowIndexTies) {
  auto cb = make_codebook(Tensor({3, 2}, std::vector<double>{0, 0, 1, 1, 2, 0}));
  EXPECT_EQ(vq_assign(Tensor({1, 2}, std::vector<double>{0.9, 0.9}), cb), std::vector<std::size_t>{1});
  EXPECT_EQ(vq_assign(Tensor({1, 2}, std::vector<double>{2, 0}), cb), std::vector<std::size_t>{2});
  // (1, 0) is at distance 1 from all three entries.
  EXPECT_EQ(vq_assign(Tensor({1, 2}, std::vector<double>{1, 0}), cb), std::vector<std::size_t>{0});
  EXPECT_THROW(vq_assign(Tensor({1, 3}), cb), ShapeError);
}

TEST(Vq, EmaDecayOneFreezesCodebook) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  Tensor init({8, 4}), feats({20, 4});
  for (auto& v : init.values()) v = nd(rng);
  for (auto& v : feats.values()) v = nd(rng);
  auto cb = make_codebook(init, 1.0);
  const auto codes = vq_assign(feats, cb);
  vq_ema_update(cb, feats, codes);
  EXPECT_EQ(cb.entries, init);
}

TEST(Vq, EmaDecayZeroTakesClusterMean) {
  auto cb = make_codebook(Tensor({4, 2}, std::vector<double>{0, 0, 5, 5, -5, 5, 5, -5}), 0.0);
  const Tensor feats({3, 2}, std::vector<double>{0.5, 0.1, -0.2, 0.3, 0.3, -0.1});
  const std::vector<std::size_t> codes{0, 0, 0};
  vq_ema_update(cb, feats, codes);
  EXPECT_NEAR(cb.entries[0], 0.2, 1e-4);
  EXPECT_NEAR(cb.entries[1], 0.1, 1e-4);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_GT(cb.ema_cluster_size[k] + cb.laplace_epsilon, 0.0);
  EXPECT_TRUE(cb.entries.all_finite());
}

TEST(Vq, EmaConvergesGeometrically) {
  auto cb = make_codebook(Tensor({2, 1}, std::vector<double>{0.0, 10.0}), 0.5, 0.0);
  const Tensor feats({2, 1}, std::vector<double>{1.0, 3.0});
  const std::vector<std::size_t> codes{0, 0};
  // Entry 0 tracks sum/count = (0.5^k * 0 + (1 - 0.5^k) * 4) / (0.5^k + (1 - 0.5^k) * 2).
  for (int k = 1; k <= 12; ++k) {
    vq_ema_update(cb, feats, codes);
    const double a = std::pow(0.5, k);
    const double size0 = a + (1 - a) * 2.0, size1 = a;
    const double total = size0 + size1;
    EXPECT_NEAR(cb.entries[0], (1 - a) * 4.0 / (size0 / total * total), 1e-12);
    EXPECT_LT(std::abs(cb.entries[0] - 2.0), 2.0 * a + 1e-12);
  }
}

TEST(Vq, PerplexityAndSimilarity) {
  std::vector<std::size_t> all(256);
  for (std::size_t i = 0; i < 256; ++i) all[i] = i;
  EXPECT_NEAR(code_perplexity(all, 256), 256.0, 1e-9);
  const std::vector<std::size_t> one(10, 3);
  EXPECT_NEAR(code_perplexity(one, 256), 1.0, 1e-12);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at({i, i}) = 2.0;
  EXPECT_NEAR(codebook_similarity(make_codebook(eye)), 0.0, 1e-15);
  EXPECT_NEAR(codebook_similarity(make_codebook(Tensor({3, 2}, 1.0))), 1.0, 1e-12);
}

TEST(Ssl, ReconstructionZeroAndSkippedContrastive) {
  std::mt19937_64 rng(14);
  Tensor target({1, 4}, std::vector<double>{0.5, -0.5, 0.25, 0.0});
  auto cb = make_codebook(target);
  nn::Tape tape;
  const std::vector<std::size_t> codes{0};
  const auto loss = ssl_loss(tape.leaf(target), target, codes, nn::Var(), cb, {}, 0.0, rng);
  EXPECT_EQ(loss.parts.reconstruction, 0.0);
  EXPECT_TRUE(loss.parts.contrastive_skipped);
}

TEST(Ssl, UniformUsageHasZeroDiversityLoss) {
  // Orthonormal entries and one assignment feature sitting on each entry
  // with a huge temperature give uniform soft usage.
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
  auto cb = make_codebook(eye);
  std::mt19937_64 rng(15);
  SslWeights w;
  w.assignment_temperature = 1e9;
  nn::Tape tape;
  const std::vector<std::size_t> codes{0, 1, 2, 3};
  const auto loss = ssl_loss(tape.leaf(eye), eye, codes, tape.leaf(eye), cb, w, 0.0, rng);
  EXPECT_NEAR(loss.parts.diversity, 0.0, 1e-9);
  EXPECT_NEAR(loss.parts.similarity, 0.0, 1e-15);
  EXPECT_EQ(loss.parts.negatives, 3u);
}

TEST(Ssl, CurriculumRampsNegatives) {
  SslWeights w;
  EXPECT_EQ(curriculum_negatives(w, 0.0), 8u);
  EXPECT_EQ(curriculum_negatives(w, 0.5), 36u);
  EXPECT_EQ(curriculum_negatives(w, 1.0), 64u);
  EXPECT_EQ(curriculum_negatives(w, 3.0), 64u);
}

TEST(Ssl, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  std::normal_distribution<double> nd;
  Tensor entries({5, 6}), pred({7, 6}), z({9, 6});
  for (auto& v : entries.values()) v = nd(rng);
  for (auto& v : pred.values()) v = nd(rng);
  for (auto& v : z.values()) v = 0.3 * nd(rng);
  auto cb = make_codebook(entries);
  const auto codes = vq_assign(pred, cb);
  Tensor targets({7, 6});
  for (std::size_t m = 0; m < 7; ++m)
    for (std::size_t j = 0; j < 6; ++j) targets[m * 6 + j] = entries[codes[m] * 6 + j];
  SslWeights w;
  w.assignment_temperature = 2.0;
  auto fn = [&](nn::Tape&, const std::vector<nn::Var>& in) {
    std::mt19937_64 local(17);  // identical negatives on every evaluation
    return ssl_loss(in[0], targets, codes, in[1], cb, w, 0.0, local).total;
  };
  EXPECT_LT(nn::grad_check(fn, {pred, z}).max_relative_error, 1e-4);
}
