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
#include <vector>

namespace cupe::audio {

inline constexpr int kSampleRate = 16000;

struct AudioClip {
  std::vector<double> samples;  // nominally in [-1, 1]
  int sample_rate = kSampleRate;
  std::string source_id;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

class WavError : public std::runtime_error {
 public:
  enum class Kind { kIo, kMalformed, kUnsupportedEncoding, kChannels, kSampleRate, kNonFinite };
  WavError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class Encoding { kPcm16, kPcm24, kPcm32, kFloat32, kFloat64 };

/// Mono 16 kHz RIFF/WAVE, integer PCM or IEEE float (plain or extensible fmt).
AudioClip load_wav(const std::filesystem::path& path);
AudioClip parse_wav(const std::vector<std::uint8_t>& bytes, const std::string& source_id = {});

/// Integer encodings clamp to full scale and round to nearest, so 16-bit
/// files read by load_wav write back bit-exactly.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip, Encoding enc = Encoding::kPcm16, int channels = 1);
void save_wav(const std::filesystem::path& path, const AudioClip& clip, Encoding enc = Encoding::kPcm16);

}  // namespace cupe::audio
