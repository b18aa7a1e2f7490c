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

#include "cupe/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace cupe::audio {

namespace {

static_assert(std::endian::native == std::endian::little, "WAV codec assumes a little-endian host");

using Kind = WavError::Kind;

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > b.size()) throw WavError(Kind::kMalformed, "truncated WAV data");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, b.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v;
    std::memcpy(&v, b.data() + pos, 2);
    pos += 2;
    return v;
  }
  std::string tag() {
    need(4);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), 4);
    pos += 4;
    return s;
  }
};

struct Format {
  std::uint16_t tag = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
};

constexpr std::uint16_t kTagPcm = 1, kTagFloat = 3, kTagExtensible = 0xFFFE;

}  // namespace

AudioClip parse_wav(const std::vector<std::uint8_t>& bytes, const std::string& source_id) {
  Reader r{bytes};
  if (bytes.size() < 12 || r.tag() != "RIFF") throw WavError(Kind::kMalformed, "not a RIFF file");
  r.u32();
  if (r.tag() != "WAVE") throw WavError(Kind::kMalformed, "RIFF file is not WAVE");

  Format fmt;
  bool have_fmt = false;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;
  while (r.pos + 8 <= bytes.size()) {
    const std::string id = r.tag();
    const std::uint32_t len = r.u32();
    const std::size_t body = r.pos;
    if (id == "fmt ") {
      if (len < 16) throw WavError(Kind::kMalformed, "fmt chunk too short");
      r.need(len);
      fmt.tag = r.u16();
      fmt.channels = r.u16();
      fmt.rate = r.u32();
      r.u32();
      fmt.block_align = r.u16();
      fmt.bits = r.u16();
      if (fmt.tag == kTagExtensible) {
        if (len < 40) throw WavError(Kind::kMalformed, "extensible fmt chunk too short");
        r.pos = body + 24;
        fmt.tag = r.u16();  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      // Some writers leave the length unset on streamed output.
      data_len = std::min<std::size_t>(len, bytes.size() - body);
      data = bytes.data() + body;
    }
    r.pos = body + len + (len & 1);
    if (data && have_fmt) break;
  }
  if (!have_fmt) throw WavError(Kind::kMalformed, "missing fmt chunk");
  if (!data) throw WavError(Kind::kMalformed, "missing data chunk");
  if (fmt.channels != 1)
    throw WavError(Kind::kChannels, "expected mono audio, got " + std::to_string(fmt.channels) + " channels");
  if (fmt.rate != kSampleRate)
    throw WavError(Kind::kSampleRate, "expected 16000 Hz, got " + std::to_string(fmt.rate) + " Hz");

  const bool is_float = fmt.tag == kTagFloat;
  if (!(fmt.tag == kTagPcm && (fmt.bits == 16 || fmt.bits == 24 || fmt.bits == 32)) &&
      !(is_float && (fmt.bits == 32 || fmt.bits == 64))) {
    throw WavError(Kind::kUnsupportedEncoding, "unsupported encoding: format tag " + std::to_string(fmt.tag) +
                                                   ", " + std::to_string(fmt.bits) + " bits");
  }
  const std::size_t width = fmt.bits / 8;
  if (fmt.block_align != width) throw WavError(Kind::kMalformed, "block alignment does not match sample width");

  AudioClip clip;
  clip.source_id = source_id;
  clip.sample_rate = static_cast<int>(fmt.rate);
  const std::size_t n = data_len / width;
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = data + i * width;
    double v;
    if (is_float && width == 4) {
      float f;
      std::memcpy(&f, p, 4);
      v = f;
    } else if (is_float) {
      std::memcpy(&v, p, 8);
    } else if (width == 2) {
      std::int16_t s;
      std::memcpy(&s, p, 2);
      v = s / 32768.0;
    } else if (width == 3) {
      const std::int32_t s = static_cast<std::int32_t>(static_cast<std::uint32_t>(p[0]) << 8 |
                                                       static_cast<std::uint32_t>(p[1]) << 16 |
                                                       static_cast<std::uint32_t>(p[2]) << 24) >> 8;
      v = s / 8388608.0;
    } else {
      std::int32_t s;
      std::memcpy(&s, p, 4);
      v = s / 2147483648.0;
    }
    if (!std::isfinite(v)) throw WavError(Kind::kNonFinite, "non-finite sample at index " + std::to_string(i));
    clip.samples[i] = v;
  }
  return clip;
}

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WavError(Kind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return parse_wav(bytes, path.stem().string());
  } catch (const WavError& e) {
    throw WavError(e.kind(), path.string() + ": " + e.what());
  }
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename Int>
Int quantize(double x, double scale) {
  const double lo = static_cast<double>(std::numeric_limits<Int>::min());
  const double hi = static_cast<double>(std::numeric_limits<Int>::max());
  return static_cast<Int>(std::clamp(std::nearbyint(x * scale), lo, hi));
}

}  // namespace

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, Encoding enc, int channels) {
  std::uint16_t tag = kTagPcm, bits = 16;
  switch (enc) {
    case Encoding::kPcm16: bits = 16; break;
    case Encoding::kPcm24: bits = 24; break;
    case Encoding::kPcm32: bits = 32; break;
    case Encoding::kFloat32: tag = kTagFloat, bits = 32; break;
    case Encoding::kFloat64: tag = kTagFloat, bits = 64; break;
  }
  const std::uint32_t width = bits / 8;
  const std::uint32_t frames = static_cast<std::uint32_t>(clip.samples.size());
  const std::uint32_t data_len = frames * width * static_cast<std::uint32_t>(channels);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_len);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put<std::uint32_t>(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, tag);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate) * width * static_cast<std::uint32_t>(channels));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(width * static_cast<std::uint32_t>(channels)));
  put<std::uint16_t>(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put<std::uint32_t>(out, data_len);
  for (double x : clip.samples) {
    for (int c = 0; c < channels; ++c) {
      switch (enc) {
        case Encoding::kPcm16: put(out, quantize<std::int16_t>(x, 32768.0)); break;
        case Encoding::kPcm24: {
          const auto s = static_cast<std::uint32_t>(static_cast<std::int32_t>(std::clamp(std::nearbyint(x * 8388608.0), -8388608.0, 8388607.0)));
          out.insert(out.end(), {static_cast<std::uint8_t>(s), static_cast<std::uint8_t>(s >> 8),
                                 static_cast<std::uint8_t>(s >> 16)});
          break;
        }
        case Encoding::kPcm32: put(out, quantize<std::int32_t>(x, 2147483648.0)); break;
        case Encoding::kFloat32: put(out, static_cast<float>(x)); break;
        case Encoding::kFloat64: put(out, x); break;
      }
    }
  }
  return out;
}

void save_wav(const std::filesystem::path& path, const AudioClip& clip, Encoding enc) {
  const auto bytes = encode_wav(clip, enc);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw WavError(Kind::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw WavError(Kind::kIo, "write failed: " + path.string());
}

}  // namespace cupe::audio
