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

#ifndef RPDIAR_FEATURES_HPP_
#define RPDIAR_FEATURES_HPP_

// STFT magnitude features and synthetic feature generation.
//
// STFT policy: periodic Hann window, no head padding, tail zero-padded so that
// every shift-aligned start inside the signal begins a frame. At 8 kHz with
// frame size 512 / shift 80 a 10 s recording maps to a (257, 1000) matrix and
// one frame covers 10 ms.

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/rng.hpp"
#include "rpdiar/tensor.hpp"

namespace rpdiar {

struct FeatureChunk {
  Tensor matrix;                 // [freq_bins, frames], magnitudes >= 0
  double frame_shift_s = 0.01;
  std::string recording_id;
  std::size_t origin_frames = 0;  // offset of this chunk in the recording
  std::size_t valid_frames = 0;   // un-padded frame count (<= frames)

  std::size_t freq_bins() const { return matrix.dim(0); }
  std::size_t frames() const { return matrix.dim(1); }
};

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT, in place. Size must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = x[i + k];
        std::complex<double> v = x[i + k + len / 2] * w;
        x[i + k] = u + v;
        x[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline std::vector<std::complex<double>> dft(const std::vector<double>& frame) {
  std::vector<std::complex<double>> x(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) x[i] = frame[i];
  if (is_power_of_two(x.size())) {
    fft_radix2(x);
    return x;
  }
  // Direct transform for non power-of-two frame sizes.
  const std::size_t n = frame.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) /
                   static_cast<double>(n);
      acc += frame[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace detail

inline std::vector<double> hann_window_periodic(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                 static_cast<double>(n)));
  }
  return w;
}

// Magnitude STFT of a mono signal. freq_bins = frame_size/2 + 1 and a frame
// starts at every multiple of frame_shift inside the signal.
inline FeatureChunk stft_features(const std::vector<double>& samples,
                                  int sample_rate, int frame_size, int frame_shift,
                                  bool log_compress = false) {
  if (frame_size <= 0 || frame_shift <= 0 || frame_size < frame_shift) {
    throw ConfigError("stft_features: need frame_size >= frame_shift > 0");
  }
  if (samples.size() < static_cast<std::size_t>(frame_size)) {
    throw DataError("stft_features: audio shorter than one frame (" +
                    std::to_string(samples.size()) + " < " +
                    std::to_string(frame_size) + " samples)");
  }
  const std::size_t bins = static_cast<std::size_t>(frame_size) / 2 + 1;
  const std::size_t frames =
      (samples.size() + static_cast<std::size_t>(frame_shift) - 1) /
      static_cast<std::size_t>(frame_shift);
  const auto window = hann_window_periodic(static_cast<std::size_t>(frame_size));

  Tensor mat = Tensor::zeros({bins, frames});
  std::vector<double> frame(static_cast<std::size_t>(frame_size));
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t start = f * static_cast<std::size_t>(frame_shift);
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const std::size_t s = start + i;
      frame[i] = s < samples.size() ? samples[s] * window[i] : 0.0;
    }
    auto spec = detail::dft(frame);
    for (std::size_t b = 0; b < bins; ++b) {
      double mag = std::abs(spec[b]);
      mat[b * frames + f] = log_compress ? std::log1p(mag) : mag;
    }
  }
  FeatureChunk out;
  out.matrix = mat;
  out.frame_shift_s = static_cast<double>(frame_shift) / sample_rate;
  out.valid_frames = frames;
  return out;
}

// Splits a full-recording feature matrix into fixed-size chunks. Origins step
// by hop_frames; the last chunk is the first one reaching the end and is
// zero-padded past valid_frames.
inline std::vector<FeatureChunk> chunk_recording(const FeatureChunk& features,
                                                 std::size_t chunk_frames,
                                                 std::size_t hop_frames) {
  if (chunk_frames == 0 || hop_frames == 0) {
    throw ConfigError("chunk_recording: chunk and hop must be positive");
  }
  const std::size_t bins = features.freq_bins();
  const std::size_t total = features.frames();
  std::vector<FeatureChunk> out;
  for (std::size_t origin = 0;; origin += hop_frames) {
    FeatureChunk c;
    c.frame_shift_s = features.frame_shift_s;
    c.recording_id = features.recording_id;
    c.origin_frames = features.origin_frames + origin;
    c.valid_frames = std::min(chunk_frames, total - origin);
    Tensor m = Tensor::zeros({bins, chunk_frames});
    for (std::size_t b = 0; b < bins; ++b) {
      for (std::size_t t = 0; t < c.valid_frames; ++t) {
        m[b * chunk_frames + t] = features.matrix[b * total + origin + t];
      }
    }
    c.matrix = m;
    out.push_back(std::move(c));
    if (origin + chunk_frames >= total) break;
  }
  return out;
}

// Synthetic speakers are deterministic spectral templates: each speaker
// energizes a seeded subset of bins. Frame values are the sum of the active
// speakers' jittered templates plus a nonnegative noise floor, all driven by
// counter-based draws so a chunk decomposes exactly into per-speaker parts.
struct SyntheticSpeakerSpec {
  int num_speakers = 2;
  int freq_bins = 16;
  double band_fraction = 0.35;  // fraction of bins a speaker energizes
  double active_level = 1.0;
  double floor_level = 0.05;
  double jitter_sigma = 0.10;   // lognormal amplitude jitter per frame/bin
  double noise_sigma = 0.02;    // noise floor scale
  std::uint64_t seed = 1;       // fixes the speaker templates

  double template_at(int speaker, int bin) const {
    double u = hash_uniform(seed, static_cast<std::uint64_t>(speaker) + 1,
                            static_cast<std::uint64_t>(bin));
    return u < band_fraction ? active_level : floor_level;
  }
};

// speaker_ids maps annotation labels to generator indices in [0, num_speakers).
inline FeatureChunk synthetic_features(const SyntheticSpeakerSpec& spec,
                                       const Annotation& annotation,
                                       const std::map<std::string, int>& speaker_ids,
                                       std::size_t frames, std::uint64_t seed,
                                       double frame_shift_s = 0.01) {
  std::vector<std::pair<Interval, int>> active;  // seconds, generator id
  for (const auto& turn : annotation.turns) {
    auto it = speaker_ids.find(turn.speaker);
    if (it == speaker_ids.end()) {
      throw DataError("synthetic_features: speaker '" + turn.speaker +
                      "' not in the generator inventory");
    }
    if (it->second < 0 || it->second >= spec.num_speakers) {
      throw DataError("synthetic_features: generator id out of range for '" +
                      turn.speaker + "'");
    }
    active.emplace_back(turn.span, it->second);
  }
  const std::size_t bins = static_cast<std::size_t>(spec.freq_bins);
  Tensor mat = Tensor::zeros({bins, frames});
  for (std::size_t t = 0; t < frames; ++t) {
    const double mid = (static_cast<double>(t) + 0.5) * frame_shift_s;
    for (std::size_t b = 0; b < bins; ++b) {
      // stream 0 is the noise floor; stream s+1 belongs to generator s
      double v = spec.noise_sigma * std::abs(hash_gaussian(seed, 0, t, b));
      for (const auto& [span, gen] : active) {
        if (!span.contains(mid)) continue;
        double jitter = hash_gaussian(seed, static_cast<std::uint64_t>(gen) + 1, t, b);
        v += spec.template_at(gen, static_cast<int>(b)) *
             std::exp(spec.jitter_sigma * jitter);
      }
      mat[b * frames + t] = v;
    }
  }
  FeatureChunk out;
  out.matrix = mat;
  out.frame_shift_s = frame_shift_s;
  out.recording_id = annotation.recording_id;
  out.valid_frames = frames;
  return out;
}

// ---- feature file I/O (binary, little-endian doubles) ----

inline constexpr char kFeatureMagic[8] = {'R', 'P', 'D', 'F', 'E', 'A', 'T', '1'};

inline void write_features(const FeatureChunk& chunk, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file: " + path);
  out.write(kFeatureMagic, 8);
  std::uint64_t dims[2] = {chunk.freq_bins(), chunk.frames()};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  double shift = chunk.frame_shift_s;
  out.write(reinterpret_cast<const char*>(&shift), sizeof(shift));
  out.write(reinterpret_cast<const char*>(chunk.matrix.values().data()),
            static_cast<std::streamsize>(chunk.matrix.size() * sizeof(double)));
  if (!out) throw IoError("failed while writing feature file: " + path);
}

inline FeatureChunk read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kFeatureMagic, 8) != 0) {
    throw IoError("bad feature file magic: " + path);
  }
  std::uint64_t dims[2];
  double shift = 0;
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  in.read(reinterpret_cast<char*>(&shift), sizeof(shift));
  if (!in) throw IoError("truncated feature file header: " + path);
  std::vector<double> data(dims[0] * dims[1]);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw IoError("truncated feature file payload: " + path);
  FeatureChunk out;
  out.matrix = Tensor::from_data({dims[0], dims[1]}, std::move(data));
  out.frame_shift_s = shift;
  out.valid_frames = dims[1];
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_FEATURES_HPP_
