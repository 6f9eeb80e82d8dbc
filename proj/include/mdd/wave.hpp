// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mdd/common.hpp"

namespace mdd {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;

  size_t size() const { return samples.size(); }
  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
  double rms() const {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (double s : samples) acc += s * s;
    return std::sqrt(acc / samples.size());
  }
};

namespace detail {

inline uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (uint32_t(p[3]) << 24);
}
inline uint16_t read_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}
inline void write_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace detail

// Linear resampler; adequate for the synthetic corpora this project ingests.
inline Waveform resample(const Waveform& in, int target_rate) {
  if (target_rate <= 0) throw ConfigError("resample: target rate must be > 0");
  if (in.sample_rate == target_rate || in.samples.empty()) {
    Waveform out = in;
    out.sample_rate = target_rate;
    return out;
  }
  double ratio = static_cast<double>(in.sample_rate) / target_rate;
  size_t n_out = static_cast<size_t>(
      std::floor((in.samples.size() - 1) / ratio)) + 1;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (size_t i = 0; i < n_out; ++i) {
    double pos = i * ratio;
    size_t i0 = static_cast<size_t>(pos);
    size_t i1 = std::min(i0 + 1, in.samples.size() - 1);
    double frac = pos - i0;
    out.samples[i] = (1.0 - frac) * in.samples[i0] + frac * in.samples[i1];
  }
  return out;
}

// Reads mono WAV, PCM16 or float32. Samples are normalized into [-1, 1];
// other rates are resampled to target_rate when it is nonzero.
inline Waveform read_wav(const std::string& path, int target_rate = 0) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open audio file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw IngestError("not a RIFF/WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    uint32_t chunk_len = detail::read_u32(&bytes[pos + 4]);
    if (std::memcmp(&bytes[pos], "fmt ", 4) == 0 && chunk_len >= 16) {
      format = detail::read_u16(&bytes[pos + 8]);
      channels = detail::read_u16(&bytes[pos + 10]);
      rate = detail::read_u32(&bytes[pos + 12]);
      bits = detail::read_u16(&bytes[pos + 22]);
    } else if (std::memcmp(&bytes[pos], "data", 4) == 0) {
      data_off = pos + 8;
      data_len = std::min<size_t>(chunk_len, bytes.size() - data_off);
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (data_off == 0) throw IngestError("WAV has no data chunk: " + path);
  if (channels != 1)
    throw IngestError("expected mono audio, got " + std::to_string(channels) +
                      " channels: " + path);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    size_t n = data_len / 2;
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      int16_t v = static_cast<int16_t>(
          detail::read_u16(&bytes[data_off + 2 * i]));
      w.samples[i] = v / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    size_t n = data_len / 4;
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      uint32_t u = detail::read_u32(&bytes[data_off + 4 * i]);
      float v;
      std::memcpy(&v, &u, 4);
      if (!std::isfinite(v))
        throw IngestError("non-finite sample in " + path);
      w.samples[i] = std::clamp<double>(v, -1.0, 1.0);
    }
  } else {
    throw IngestError("unsupported WAV encoding (format=" +
                      std::to_string(format) + ", bits=" +
                      std::to_string(bits) + "): " + path);
  }
  if (w.samples.empty()) throw IngestError("WAV has zero samples: " + path);
  if (target_rate > 0 && w.sample_rate != target_rate)
    w = resample(w, target_rate);
  return w;
}

inline void write_wav_pcm16(const std::string& path, const Waveform& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write audio file: " + path);
  uint32_t n = static_cast<uint32_t>(w.samples.size());
  uint32_t data_len = n * 2;
  f.write("RIFF", 4);
  detail::write_u32(f, 36 + data_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  detail::write_u32(f, 16);
  detail::write_u16(f, 1);  // PCM
  detail::write_u16(f, 1);  // mono
  detail::write_u32(f, static_cast<uint32_t>(w.sample_rate));
  detail::write_u32(f, static_cast<uint32_t>(w.sample_rate) * 2);
  detail::write_u16(f, 2);
  detail::write_u16(f, 16);
  f.write("data", 4);
  detail::write_u32(f, data_len);
  for (double s : w.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    int v = static_cast<int>(std::lrint(c * 32768.0));
    v = std::clamp(v, -32768, 32767);
    detail::write_u16(f, static_cast<uint16_t>(static_cast<int16_t>(v)));
  }
  if (!f) throw IoError("short write: " + path);
}

inline void write_wav_float32(const std::string& path, const Waveform& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write audio file: " + path);
  uint32_t n = static_cast<uint32_t>(w.samples.size());
  uint32_t data_len = n * 4;
  f.write("RIFF", 4);
  detail::write_u32(f, 36 + data_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  detail::write_u32(f, 16);
  detail::write_u16(f, 3);  // IEEE float
  detail::write_u16(f, 1);
  detail::write_u32(f, static_cast<uint32_t>(w.sample_rate));
  detail::write_u32(f, static_cast<uint32_t>(w.sample_rate) * 4);
  detail::write_u16(f, 4);
  detail::write_u16(f, 32);
  f.write("data", 4);
  detail::write_u32(f, data_len);
  for (double s : w.samples) {
    float v = static_cast<float>(std::clamp(s, -1.0, 1.0));
    uint32_t u;
    std::memcpy(&u, &v, 4);
    detail::write_u32(f, u);
  }
  if (!f) throw IoError("short write: " + path);
}

}  // namespace mdd
