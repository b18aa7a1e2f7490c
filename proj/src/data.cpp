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

#include "cupe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

namespace cupe::data {

namespace {

std::string read_text(const std::filesystem::path& path, const char* what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ManifestError(std::string("cannot read ") + what + " " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(s);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::size_t ms_to_samples(double ms) { return static_cast<std::size_t>(std::llround(ms * audio::kSampleRate / 1000.0)); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

RecipeBook parse_recipes(const std::string& text) {
  RecipeBook book;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split(line, '\t');
    const auto fail = [&](const std::string& why) {
      return ManifestError("recipes line " + std::to_string(n) + ": " + why);
    };
    if (cells.size() != 3) throw fail("expected three tab-separated fields");
    std::size_t cls;
    Recipe r;
    try {
      cls = std::stoul(cells[0]);
      for (const auto& p : split(cells[1], ',')) {
        const auto colon = p.find(':');
        if (colon == std::string::npos) throw fail("partial '" + p + "' is not hz:amplitude");
        r.partials.push_back({std::stod(p.substr(0, colon)), std::stod(p.substr(colon + 1))});
      }
      r.noise = std::stod(cells[2]);
    } catch (const std::logic_error&) {
      throw fail("unparseable number");
    }
    if (r.partials.empty()) throw fail("no partials");
    for (const auto& p : r.partials)
      if (p.hz <= 0.0 || p.hz >= audio::kSampleRate / 2.0) throw fail("partial outside (0, 8000) Hz");
    if (cls != book.recipes.size()) throw fail("classes must be listed in order from 0");
    book.recipes.push_back(std::move(r));
  }
  if (book.recipes.empty()) throw ManifestError("recipe table is empty");
  return book;
}

RecipeBook load_recipes(const std::filesystem::path& path) { return parse_recipes(read_text(path, "recipes")); }

RecipeBook default_recipes() { return load_recipes(phonemap::default_data_dir() / "synth_recipes.tsv"); }

SynthUtterance synth_utterance(const SynthSpec& spec, const RecipeBook& book) {
  if (spec.durations_ms.size() != spec.classes.size())
    throw std::invalid_argument("synth_utterance: one duration per phoneme required");
  const std::size_t xf = ms_to_samples(spec.crossfade_ms);
  const std::size_t half = xf / 2;
  const std::size_t lead = ms_to_samples(spec.lead_ms), trail = ms_to_samples(spec.trail_ms);

  SynthUtterance out;
  out.classes = spec.classes;
  std::size_t pos = lead;
  for (std::size_t i = 0; i < spec.classes.size(); ++i) {
    const double d = spec.durations_ms[i];
    if (d < 30.0 || d > 300.0) throw std::invalid_argument("synth_utterance: duration outside [30, 300] ms");
    if (spec.classes[i] >= book.size()) throw std::invalid_argument("synth_utterance: class has no recipe");
    const std::size_t len = ms_to_samples(d);
    out.boundaries.emplace_back(pos, pos + len);
    pos += len;
  }
  const std::size_t total = pos + trail;
  out.clip.samples.assign(total, 0.0);
  out.clip.source_id = "synth-" + std::to_string(spec.seed);

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double w = 2.0 * std::numbers::pi / audio::kSampleRate;
  auto ramp = [&](double x) { return 0.5 - 0.5 * std::cos(std::numbers::pi * std::clamp(x, 0.0, 1.0)); };

  for (std::size_t i = 0; i < spec.classes.size(); ++i) {
    const Recipe& r = book.recipes[spec.classes[i]];
    std::vector<double> phases;
    for (std::size_t k = 0; k < r.partials.size(); ++k) phases.push_back(phase(rng));
    const auto [b, e] = out.boundaries[i];
    const std::size_t from = b >= half ? b - half : 0;
    const std::size_t to = std::min(total, e + half);
    for (std::size_t n = from; n < to; ++n) {
      double gain = 1.0;
      if (xf > 0) {
        gain = ramp((static_cast<double>(n) - (static_cast<double>(b) - static_cast<double>(half)) + 0.5) / xf) *
               ramp(((static_cast<double>(e) + static_cast<double>(half)) - static_cast<double>(n) - 0.5) / xf);
      }
      double v = 0.0;
      for (std::size_t k = 0; k < r.partials.size(); ++k)
        v += r.partials[k].amplitude * std::sin(w * r.partials[k].hz * static_cast<double>(n) + phases[k]);
      v += r.noise * gauss(rng);
      out.clip.samples[n] += gain * v;
    }
  }
  return out;
}

std::filesystem::path Manifest::resolve(const ManifestRecord& r) const {
  const std::filesystem::path p(r.path);
  return p.is_absolute() ? p : base_dir / p;
}

namespace {
constexpr const char* kHeader = "path\ttokens\tlang\tsplit";
}

Manifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_text(path, "manifest");
  Manifest m;
  m.base_dir = path.parent_path();
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (n == 1) {
      if (line != kHeader) throw ManifestError(path.string() + ": missing header '" + std::string(kHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto cells = split(line, '\t');
    if (cells.size() != 4) throw ManifestError(path.string() + " line " + std::to_string(n) + ": expected 4 fields");
    m.records.push_back({cells[0], cells[1], cells[2], cells[3]});
  }
  if (n == 0) throw ManifestError(path.string() + ": empty manifest");
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ManifestError("cannot write " + path.string());
  f << kHeader << '\n';
  for (const auto& r : m.records) f << r.path << '\t' << r.tokens << '\t' << r.lang << '\t' << r.split << '\n';
  if (!f) throw ManifestError("write failed: " + path.string());
}

std::vector<PlannedUtterance> plan_dataset(const DatasetOptions& opt, const phonemap::PhonemeInventory* inv) {
  if (opt.n_classes < 2) throw std::invalid_argument("plan_dataset: need at least two classes");
  if (inv && opt.n_classes > inv->size()) throw std::invalid_argument("plan_dataset: more classes than the inventory");
  auto clash = [&](std::size_t a, std::size_t b) {
    return a == b || (inv && inv->find(inv->classes[a] + inv->classes[b]).has_value());
  };

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> count(opt.mean_phonemes, opt.std_phonemes);
  std::uniform_real_distribution<double> dur(opt.min_duration_ms, opt.max_duration_ms);
  std::uniform_real_distribution<double> sil(opt.min_silence_ms, opt.max_silence_ms);

  std::vector<std::size_t> deck;
  auto refill = [&] {
    std::vector<std::size_t> fresh(opt.n_classes);
    for (std::size_t c = 0; c < fresh.size(); ++c) fresh[c] = c;
    std::shuffle(fresh.begin(), fresh.end(), rng);
    deck.insert(deck.begin(), fresh.begin(), fresh.end());
  };
  auto deal = [&](std::optional<std::size_t> prev) {
    if (deck.empty()) refill();
    if (prev && clash(*prev, deck.back())) {
      auto it = std::find_if(deck.rbegin(), deck.rend(), [&](std::size_t c) { return !clash(*prev, c); });
      if (it == deck.rend()) {
        refill();
        it = std::find_if(deck.rbegin(), deck.rend(), [&](std::size_t c) { return !clash(*prev, c); });
        if (it == deck.rend()) throw std::logic_error("plan_dataset: no admissible successor class");
      }
      std::iter_swap(it, deck.rbegin());
    }
    const std::size_t c = deck.back();
    deck.pop_back();
    return c;
  };

  const std::size_t holdout = static_cast<std::size_t>(std::llround(opt.holdout_fraction * static_cast<double>(opt.n_utts)));
  std::vector<PlannedUtterance> out;
  for (std::size_t u = 0; u < opt.n_utts; ++u) {
    PlannedUtterance p;
    std::ostringstream id;
    id << "utt_" << std::setw(4) << std::setfill('0') << u;
    p.id = id.str();
    p.split = u + holdout >= opt.n_utts ? "test" : "train";
    const long n = std::clamp<long>(std::lround(count(rng)), 1, 16);
    std::optional<std::size_t> prev;
    for (long i = 0; i < n; ++i) {
      const std::size_t c = deal(prev);
      p.spec.classes.push_back(c);
      p.spec.durations_ms.push_back(dur(rng));
      prev = c;
    }
    p.spec.lead_ms = sil(rng);
    p.spec.trail_ms = sil(rng);
    p.spec.seed = splitmix64(opt.seed ^ splitmix64(u));
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

std::string tokens_of(const std::vector<std::size_t>& classes, const phonemap::PhonemeInventory& inv) {
  std::string s;
  for (std::size_t c : classes) s += (s.empty() ? "" : " ") + inv.classes[c];
  return s;
}

}  // namespace

Manifest make_dataset(const std::filesystem::path& dir, const DatasetOptions& opt,
                      const phonemap::PhonemeInventory& inv, const RecipeBook& book) {
  if (opt.n_classes > book.size()) throw std::invalid_argument("make_dataset: more classes than recipes");
  std::filesystem::create_directories(dir);
  Manifest m;
  m.base_dir = dir;
  for (const auto& p : plan_dataset(opt, &inv)) {
    auto u = synth_utterance(p.spec, book);
    u.clip.source_id = p.id;
    const std::string file = p.id + ".wav";
    audio::save_wav(dir / file, u.clip);
    m.records.push_back({file, tokens_of(u.classes, inv), opt.lang, p.split});
  }
  save_manifest(m, dir / "manifest.tsv");
  return m;
}

std::vector<Utterance> synth_corpus(const DatasetOptions& opt, const RecipeBook& book,
                                    const phonemap::PhonemeInventory* inv) {
  if (opt.n_classes > book.size()) throw std::invalid_argument("synth_corpus: more classes than recipes");
  std::vector<Utterance> out;
  for (const auto& p : plan_dataset(opt, inv)) {
    auto u = synth_utterance(p.spec, book);
    out.push_back({p.id, p.split, std::move(u.clip.samples), std::move(u.classes)});
  }
  return out;
}

std::vector<Utterance> load_corpus(const Manifest& m, const phonemap::PhonemeInventory& inv, const std::string& split,
                                   const phonemap::MapOptions& opt) {
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (!split.empty() && r.split != split) continue;
    Utterance u;
    u.split = r.split;
    u.id = std::filesystem::path(r.path).stem().string();
    try {
      u.classes = phonemap::map_sequence(phonemap::split_tokens(r.tokens), inv, opt).classes;
    } catch (const phonemap::UnknownSymbol& e) {
      throw ManifestError("manifest record " + std::to_string(i + 1) + " (" + r.path + "): " + e.what());
    }
    u.audio = audio::load_wav(m.resolve(r)).samples;
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace cupe::data
