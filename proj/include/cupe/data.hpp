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
#include <string>
#include <utility>
#include <vector>

#include "cupe/audio.hpp"
#include "cupe/phonemap.hpp"

namespace cupe::data {

struct Partial {
  double hz;
  double amplitude;
};

struct Recipe {
  std::vector<Partial> partials;
  double noise = 0.0;  // rms of additive Gaussian noise
};

/// One recipe per class, indexed by class id.
struct RecipeBook {
  std::vector<Recipe> recipes;
  std::size_t size() const { return recipes.size(); }
};

/// `class<TAB>hz:amp,hz:amp[,...]<TAB>noise` records, `#` comments.
RecipeBook parse_recipes(const std::string& text);
RecipeBook load_recipes(const std::filesystem::path& path);
RecipeBook default_recipes();

struct SynthSpec {
  std::vector<std::size_t> classes;
  std::vector<double> durations_ms;  // one per class entry, within [30, 300]
  double lead_ms = 100.0;
  double trail_ms = 100.0;
  double crossfade_ms = 10.0;
  std::uint64_t seed = 0;
};

struct SynthUtterance {
  audio::AudioClip clip;
  std::vector<std::size_t> classes;
  std::vector<std::pair<std::size_t, std::size_t>> boundaries;  // sample spans [begin, end)
};

/// Phoneme i nominally spans its duration after the lead silence and the
/// earlier phonemes; its waveform extends half a crossfade past each edge
/// under a raised-cosine ramp, so neighbours sum to unit gain.
SynthUtterance synth_utterance(const SynthSpec& spec, const RecipeBook& book);

struct ManifestRecord {
  std::string path;    // relative to the manifest directory unless absolute
  std::string tokens;  // whitespace-separated raw symbols
  std::string lang;
  std::string split;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const ManifestRecord& r) const;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// UTF-8 TSV `path<TAB>tokens<TAB>lang<TAB>split` with a header line.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

struct DatasetOptions {
  std::size_t n_utts = 50;
  std::size_t n_classes = 8;
  std::uint64_t seed = 0;
  double mean_phonemes = 6.3;
  double std_phonemes = 1.45;
  double min_duration_ms = 60.0;
  double max_duration_ms = 100.0;
  double min_silence_ms = 50.0;
  double max_silence_ms = 150.0;
  double holdout_fraction = 0.0;  // last share of utterances tagged "test"
  std::string lang = "synth";
};

/// Writes utt_NNNN.wav files and manifest.tsv under dir. Classes are the
/// first n_classes of the inventory, dealt from shuffled balanced decks with
/// no immediate repeats.
Manifest make_dataset(const std::filesystem::path& dir, const DatasetOptions& opt,
                      const phonemap::PhonemeInventory& inv, const RecipeBook& book);

struct PlannedUtterance {
  std::string id;
  std::string split;
  SynthSpec spec;
};

/// Same corpus as make_dataset without touching the filesystem. With an
/// inventory, neighbours whose symbols would merge on mapping are avoided.
std::vector<PlannedUtterance> plan_dataset(const DatasetOptions& opt, const phonemap::PhonemeInventory* inv = nullptr);

struct Utterance {
  std::string id;
  std::string split;
  std::vector<double> audio;
  std::vector<std::size_t> classes;
};

/// In-memory corpus equal to make_dataset followed by load_corpus, minus
/// 16-bit quantization.
std::vector<Utterance> synth_corpus(const DatasetOptions& opt, const RecipeBook& book,
                                    const phonemap::PhonemeInventory* inv = nullptr);

/// Loads the records of one split (all when empty), mapping tokens
/// strictly. Errors name the record.
std::vector<Utterance> load_corpus(const Manifest& m, const phonemap::PhonemeInventory& inv,
                                   const std::string& split = {}, const phonemap::MapOptions& opt = {});

}  // namespace cupe::data
