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
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "cupe/data.hpp"

using namespace cupe;
using namespace cupe::data;
using audio::AudioClip;
using audio::Encoding;
using audio::WavError;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cupe_data_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

AudioClip random_clip(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AudioClip c;
  c.samples.resize(n);
  for (auto& s : c.samples) s = u(rng);
  return c;
}

// Power of x at frequency hz via the Goertzel recurrence.
double goertzel(std::span<const double> x, double hz) {
  const double coeff = 2.0 * std::cos(2.0 * std::numbers::pi * hz / audio::kSampleRate);
  double s1 = 0.0, s2 = 0.0;
  for (double v : x) {
    const double s0 = v + coeff * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  return s1 * s1 + s2 * s2 - coeff * s1 * s2;
}

const RecipeBook& book() {
  static const RecipeBook b = default_recipes();
  return b;
}

}  // namespace

TEST(Wav, OneSecondSixteenBit) {
  AudioClip c = random_clip(16000, 1);
  const auto clip = audio::parse_wav(audio::encode_wav(c));
  EXPECT_EQ(clip.samples.size(), 16000u);
  EXPECT_EQ(clip.sample_rate, 16000);
}

TEST(Wav, SixteenBitRoundTripIsBitExact) {
  const auto path = scratch("rt16.wav");
  const auto first = audio::parse_wav(audio::encode_wav(random_clip(5000, 2)));
  audio::save_wav(path, first);
  const auto again = audio::load_wav(path);
  EXPECT_EQ(again.samples, first.samples);
  EXPECT_EQ(audio::encode_wav(again), audio::encode_wav(first));
  std::filesystem::remove(path);
}

TEST(Wav, FloatPassThroughIsBitExact) {
  AudioClip c = random_clip(777, 3);
  for (auto& s : c.samples) s = static_cast<float>(s);
  EXPECT_EQ(audio::parse_wav(audio::encode_wav(c, Encoding::kFloat32)).samples, c.samples);
  const AudioClip d = random_clip(777, 4);
  EXPECT_EQ(audio::parse_wav(audio::encode_wav(d, Encoding::kFloat64)).samples, d.samples);
}

TEST(Wav, TwentyFourAndThirtyTwoBitPcm) {
  const AudioClip c = random_clip(1000, 5);
  const auto a = audio::parse_wav(audio::encode_wav(c, Encoding::kPcm24));
  const auto b = audio::parse_wav(audio::encode_wav(c, Encoding::kPcm32));
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    EXPECT_NEAR(a.samples[i], c.samples[i], 0.6 / 8388608.0);
    EXPECT_NEAR(b.samples[i], c.samples[i], 0.6 / 2147483648.0);
  }
  AudioClip edge;
  edge.samples = {-1.0, 1.0, -0.5};
  const auto e = audio::parse_wav(audio::encode_wav(edge, Encoding::kPcm24));
  EXPECT_EQ(e.samples[0], -1.0);
  EXPECT_EQ(e.samples[2], -0.5);
}

TEST(Wav, DistinctErrorKinds) {
  auto kind_of = [](const std::vector<std::uint8_t>& bytes) {
    try {
      audio::parse_wav(bytes);
    } catch (const WavError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return WavError::Kind::kIo;
  };
  AudioClip c = random_clip(100, 6);
  c.sample_rate = 44100;
  EXPECT_EQ(kind_of(audio::encode_wav(c)), WavError::Kind::kSampleRate);
  c.sample_rate = 16000;
  EXPECT_EQ(kind_of(audio::encode_wav(c, Encoding::kPcm16, 2)), WavError::Kind::kChannels);
  EXPECT_EQ(kind_of({'R', 'I', 'F', 'X'}), WavError::Kind::kMalformed);
  auto bytes = audio::encode_wav(c);
  bytes[20] = 2;  // a-law
  EXPECT_EQ(kind_of(bytes), WavError::Kind::kUnsupportedEncoding);
  bytes = audio::encode_wav(c);
  bytes.resize(30);
  EXPECT_EQ(kind_of(bytes), WavError::Kind::kMalformed);
  AudioClip bad;
  bad.samples = {0.0, std::nan("")};
  EXPECT_EQ(kind_of(audio::encode_wav(bad, Encoding::kFloat32)), WavError::Kind::kNonFinite);
  try {
    audio::load_wav("/nonexistent/x.wav");
    FAIL();
  } catch (const WavError& e) {
    EXPECT_EQ(e.kind(), WavError::Kind::kIo);
  }
}

TEST(Wav, SkipsUnknownChunks) {
  const AudioClip c = random_clip(10, 7);
  auto bytes = audio::encode_wav(c, Encoding::kFloat64);
  const std::vector<std::uint8_t> list{'L', 'I', 'S', 'T', 3, 0, 0, 0, 'a', 'b', 'c', 0};
  bytes.insert(bytes.begin() + 36, list.begin(), list.end());
  EXPECT_EQ(audio::parse_wav(bytes).samples, c.samples);
}

TEST(Recipes, ShippedBookIsDistinctAndOnGrid) {
  EXPECT_GE(book().size(), 65u);
  for (std::size_t a = 0; a < book().size(); ++a) {
    const auto& r = book().recipes[a];
    EXPECT_GE(r.partials.size(), 2u);
    EXPECT_LE(r.partials.size(), 3u);
    for (const auto& p : r.partials) EXPECT_EQ(std::fmod(p.hz, 300.0), 0.0);
    for (std::size_t b = 0; b < a; ++b) {
      bool same = r.partials.size() == book().recipes[b].partials.size();
      for (std::size_t k = 0; same && k < r.partials.size(); ++k) same = r.partials[k].hz == book().recipes[b].partials[k].hz;
      EXPECT_FALSE(same) << a << " vs " << b;
    }
  }
  EXPECT_THROW(parse_recipes("0\t300:1\t0\n2\t600:1\t0\n"), ManifestError);
  EXPECT_THROW(parse_recipes("0\t9000:1\t0\n"), ManifestError);
  EXPECT_THROW(parse_recipes("0\tabc\t0\n"), ManifestError);
}

TEST(Synth, DurationArithmetic) {
  SynthSpec s;
  s.classes = {0, 1, 2, 3, 4, 5};
  s.durations_ms.assign(6, 80.0);
  s.lead_ms = 100.0;
  s.trail_ms = 50.0;
  const auto u = synth_utterance(s, book());
  EXPECT_EQ(u.clip.samples.size(), 6u * 1280u + 1600u + 800u);
  ASSERT_EQ(u.boundaries.size(), 6u);
  EXPECT_EQ(u.boundaries.front().first, 1600u);
  for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(u.boundaries[i].first, u.boundaries[i - 1].second);
  EXPECT_EQ(u.boundaries.back().second, 1600u + 6u * 1280u);
}

TEST(Synth, SeedDeterminismAndSilence) {
  SynthSpec s;
  s.classes = {3, 1};
  s.durations_ms = {70.0, 90.0};
  s.seed = 11;
  EXPECT_EQ(synth_utterance(s, book()).clip.samples, synth_utterance(s, book()).clip.samples);
  auto t = s;
  t.seed = 12;
  EXPECT_NE(synth_utterance(t, book()).clip.samples, synth_utterance(s, book()).clip.samples);
  SynthSpec empty;
  const auto e = synth_utterance(empty, book());
  EXPECT_EQ(e.clip.samples.size(), 3200u);
  for (double v : e.clip.samples) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(e.classes.empty());
  s.durations_ms = {20.0, 90.0};
  EXPECT_THROW(synth_utterance(s, book()), std::invalid_argument);
}

TEST(Synth, CrossfadeKeepsUnitGain) {
  // Two phonemes with one zero-noise single-partial recipe: amplitude stays flat.
  RecipeBook flat = parse_recipes("0\t1500:1\t0\n");
  SynthSpec s;
  s.classes = {0, 0};
  s.durations_ms = {60.0, 60.0};
  const auto u = synth_utterance(s, flat);
  const std::size_t mid = u.boundaries[0].second;
  double peak = 0.0;
  for (std::size_t n = mid - 80; n < mid + 80; ++n) peak = std::max(peak, std::abs(u.clip.samples[n]));
  EXPECT_LE(peak, 2.0 + 1e-12);
}

TEST(Synth, SpanEnergyConcentratesOnRecipePartialsProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    SynthSpec s;
    for (int i = 0; i < 6; ++i) {
      s.classes.push_back(rng() % 65);
      s.durations_ms.push_back(60.0 + static_cast<double>(rng() % 41));
    }
    s.seed = rng();
    const auto u = synth_utterance(s, book());
    for (std::size_t i = 0; i < s.classes.size(); ++i) {
      const auto [b, e] = u.boundaries[i];
      const std::span<const double> span(u.clip.samples.data() + b + 80, e - b - 160);
      const auto& r = book().recipes[s.classes[i]];
      double on = 0.0, off = 0.0;
      std::size_t n_on = 0, n_off = 0;
      for (int k = 1; k <= 26; ++k) {
        const double hz = 300.0 * k;
        const bool in_recipe = std::any_of(r.partials.begin(), r.partials.end(), [&](const Partial& p) { return p.hz == hz; });
        (in_recipe ? on : off) += goertzel(span, hz);
        ++(in_recipe ? n_on : n_off);
      }
      EXPECT_GT(on / static_cast<double>(n_on), 5.0 * off / static_cast<double>(n_off));
    }
  }
}

TEST(Dataset, FiftyUtterancesWithManifest) {
  const auto dir = scratch("ds");
  DatasetOptions opt;
  opt.seed = 3;
  const auto inv = phonemap::default_inventory();
  const auto m = make_dataset(dir, opt, inv, book());
  EXPECT_EQ(m.records.size(), 50u);
  std::size_t wavs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) wavs += e.path().extension() == ".wav";
  EXPECT_EQ(wavs, 50u);

  const auto loaded = load_manifest(dir / "manifest.tsv");
  ASSERT_EQ(loaded.records.size(), 50u);
  const auto corpus = load_corpus(loaded, inv);
  const auto mem = synth_corpus(opt, book(), &inv);
  ASSERT_EQ(corpus.size(), mem.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(corpus[i].classes, mem[i].classes);
    ASSERT_EQ(corpus[i].audio.size(), mem[i].audio.size());
    for (std::size_t n = 0; n < mem[i].audio.size(); n += 97) EXPECT_NEAR(corpus[i].audio[n], mem[i].audio[n], 1.0 / 32768.0);
  }

  const auto dir2 = scratch("ds2");
  make_dataset(dir2, opt, inv, book());
  std::ifstream a(dir / "manifest.tsv"), b(dir2 / "manifest.tsv");
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST(Dataset, BalancedCountsNoRepeatsProperty) {
  const auto inv = phonemap::default_inventory();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    DatasetOptions opt;
    opt.seed = seed;
    opt.n_classes = 8 + seed * 5;
    std::vector<std::size_t> hist(opt.n_classes, 0);
    double total = 0.0;
    const auto plan = plan_dataset(opt, &inv);
    for (const auto& p : plan) {
      total += static_cast<double>(p.spec.classes.size());
      for (std::size_t i = 0; i < p.spec.classes.size(); ++i) {
        ++hist[p.spec.classes[i]];
        if (i > 0) {
          EXPECT_NE(p.spec.classes[i], p.spec.classes[i - 1]);
          EXPECT_FALSE(inv.find(inv.classes[p.spec.classes[i - 1]] + inv.classes[p.spec.classes[i]]).has_value());
        }
      }
      EXPECT_GE(p.spec.lead_ms, 50.0);
      EXPECT_LE(p.spec.trail_ms, 150.0);
    }
    const auto [mn, mx] = std::minmax_element(hist.begin(), hist.end());
    EXPECT_GT(*mn, 0u);
    EXPECT_LT(static_cast<double>(*mx) / static_cast<double>(*mn), 2.0);
    EXPECT_NEAR(total / 50.0, 6.3, 0.7);
  }
}

TEST(Dataset, HoldoutSplitAndManifestErrors) {
  DatasetOptions opt;
  opt.holdout_fraction = 0.2;
  const auto plan = plan_dataset(opt);
  EXPECT_EQ(std::count_if(plan.begin(), plan.end(), [](const auto& p) { return p.split == "test"; }), 10);
  EXPECT_EQ(plan.back().split, "test");

  const auto dir = scratch("bad");
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "m.tsv");
    f << "path\ttokens\tlang\tsplit\nx.wav\ta\n";
  }
  EXPECT_THROW(load_manifest(dir / "m.tsv"), ManifestError);
  {
    std::ofstream f(dir / "m.tsv");
    f << "path\ttokens\tlang\tsplit\nx.wav\ta ☃\tsynth\ttrain\n";
  }
  EXPECT_THROW(load_corpus(load_manifest(dir / "m.tsv"), phonemap::default_inventory()), ManifestError);
  std::filesystem::remove_all(dir);
}
