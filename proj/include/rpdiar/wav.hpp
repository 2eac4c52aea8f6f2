// Copyright (c) 2026 The rpdiar Authors
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

#ifndef RPDIAR_WAV_HPP_
#define RPDIAR_WAV_HPP_

// RIFF/WAVE reader and writer for PCM 16-bit signed little-endian mono files.
// Stereo input is rejected; sum the channels upstream first.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rpdiar/common.hpp"

namespace rpdiar {

struct WavData {
  std::vector<double> samples;  // in [-1, 1)
  int sample_rate = 0;
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline WavData read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError("not a RIFF/WAVE file: " + path);
  }
  WavData out;
  int channels = 0, bits = 0;
  bool have_fmt = false, have_data = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    char id[5] = {0};
    std::memcpy(id, bytes.data() + pos, 4);
    std::uint32_t sz = detail::read_u32le(bytes.data() + pos + 4);
    std::size_t body = pos + 8;
    if (body + sz > bytes.size()) sz = static_cast<std::uint32_t>(bytes.size() - body);
    if (std::strcmp(id, "fmt ") == 0 && sz >= 16) {
      std::uint16_t fmt = detail::read_u16le(bytes.data() + body);
      channels = detail::read_u16le(bytes.data() + body + 2);
      out.sample_rate = static_cast<int>(detail::read_u32le(bytes.data() + body + 4));
      bits = detail::read_u16le(bytes.data() + body + 14);
      if (fmt != 1) throw IoError(path + ": only PCM (format 1) WAV is supported");
      have_fmt = true;
    } else if (std::strcmp(id, "data") == 0) {
      if (!have_fmt) throw IoError(path + ": data chunk before fmt chunk");
      if (channels == 2) {
        throw IoError(path +
                      ": stereo WAV not supported; sum the channels to mono first");
      }
      if (channels != 1) throw IoError(path + ": unsupported channel count");
      if (bits != 16) throw IoError(path + ": only 16-bit PCM is supported");
      std::size_t n = sz / 2;
      out.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::int16_t s = static_cast<std::int16_t>(
            detail::read_u16le(bytes.data() + body + 2 * i));
        out.samples[i] = static_cast<double>(s) / 32768.0;
      }
      have_data = true;
    }
    pos = body + sz + (sz & 1);  // chunks are word-aligned
  }
  if (!have_fmt || !have_data) throw IoError(path + ": missing fmt or data chunk");
  return out;
}

inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write WAV file: " + path);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                 static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
    out.write(b, 4);
  };
  auto put_u16 = [&](std::uint16_t v) {
    char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
    out.write(b, 2);
  };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(static_cast<std::uint32_t>(sample_rate));
  put_u32(static_cast<std::uint32_t>(sample_rate) * 2);
  put_u16(2);
  put_u16(16);
  out.write("data", 4);
  put_u32(data_bytes);
  for (double v : samples) {
    double clamped = v < -1.0 ? -1.0 : (v > 32767.0 / 32768.0 ? 32767.0 / 32768.0 : v);
    auto s = static_cast<std::int16_t>(std::lround(clamped * 32768.0));
    put_u16(static_cast<std::uint16_t>(s));
  }
  if (!out) throw IoError("failed while writing WAV file: " + path);
}

}  // namespace rpdiar

#endif  // RPDIAR_WAV_HPP_
