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

#ifndef RPDIAR_SIMULATE_HPP_
#define RPDIAR_SIMULATE_HPP_

// Overlapping-speech mixture simulator. Each speaker independently alternates
// silences drawn from an exponential law of mean beta with utterances
// (log-normal lengths in synthetic mode, file lengths in WAV-pool mode);
// overlaying the timelines produces natural overlaps, and larger beta
// produces less overlap. Mixture `i` of a corpus derives its random stream
// from mix64(seed, i), so corpora are reproducible and mixtures
// order-independent.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/config.hpp"
#include "rpdiar/features.hpp"
#include "rpdiar/io.hpp"
#include "rpdiar/rng.hpp"
#include "rpdiar/scoring.hpp"
#include "rpdiar/wav.hpp"

namespace rpdiar {

// Real-speech inventory entry: one speaker with a pool of utterance WAVs.
struct WavPool {
  std::string speaker;
  std::vector<std::string> paths;
};

struct SimulationSpec {
  int num_speakers = 2;             // speakers placed in each mixture
  double beta_s = 2.0;              // mean silence gap, seconds
  double utterance_median_s = 2.5;  // log-normal utterance length
  double utterance_log_sigma = 0.4;
  double target_duration_s = 60.0;  // each speaker's timeline covers this span
  int num_mixtures = 10;
  std::uint64_t seed = 1;

  // Synthetic mode (default): deterministic spectral-template speakers.
  int inventory_size = 20;
  std::vector<int> inventory_subset;  // nonempty: sample speakers only from here
  SyntheticSpeakerSpec generator;
  double frame_shift_s = 0.01;

  // WAV-pool mode: used instead of the synthetic inventory when nonempty.
  std::vector<WavPool> wav_pools;
  int sample_rate = 8000;
  int frame_size = 512;
  int frame_shift_samples = 80;

  bool wav_mode() const { return !wav_pools.empty(); }

  void validate() const {
    if (!(beta_s > 0.0)) throw ConfigError("SimulationSpec: beta must be > 0");
    if (num_speakers < 1)
      throw ConfigError("SimulationSpec: num_speakers must be >= 1");
    if (!(utterance_median_s > 0.0))
      throw ConfigError("SimulationSpec: utterance median must be > 0");
    if (!(target_duration_s > 0.0))
      throw ConfigError("SimulationSpec: target duration must be > 0");
    if (num_mixtures < 1)
      throw ConfigError("SimulationSpec: num_mixtures must be >= 1");
    std::size_t pool = wav_mode() ? wav_pools.size()
                                  : (inventory_subset.empty()
                                         ? static_cast<std::size_t>(inventory_size)
                                         : inventory_subset.size());
    if (static_cast<std::size_t>(num_speakers) > pool)
      throw ConfigError("SimulationSpec: num_speakers exceeds the inventory");
    if (!wav_mode()) {
      for (int i : inventory_subset) {
        if (i < 0 || i >= inventory_size)
          throw ConfigError("SimulationSpec: inventory_subset index out of range");
      }
    }
    if (wav_mode()) {
      for (const WavPool& p : wav_pools) {
        if (p.speaker.empty() || p.paths.empty())
          throw ConfigError("SimulationSpec: WAV pool needs a speaker and paths");
      }
      if (sample_rate <= 0 || frame_size <= 0 || frame_shift_samples <= 0)
        throw ConfigError("SimulationSpec: bad WAV geometry");
    }
  }
};

inline std::string speaker_label(int inventory_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "spk%03d", inventory_index);
  return buf;
}

struct Mixture {
  std::string id;
  Annotation annotation;
  FeatureChunk features;
  std::vector<double> samples;  // WAV mode only
  double duration_s = 0.0;
  std::map<std::string, int> speaker_ids;  // label -> inventory index
};

namespace detail {

struct PlacedUtterance {
  std::string label;
  double start = 0.0, length = 0.0;
  std::string wav_path;  // WAV mode
};

}  // namespace detail

// Timeline and ground truth only; features left empty. Deterministic function
// of (spec, mixture_index) sharing all draws with simulate_mixture.
inline Mixture simulate_annotation(
    const SimulationSpec& spec, std::uint64_t mixture_index,
    std::vector<detail::PlacedUtterance>* placements = nullptr) {
  spec.validate();
  Rng rng(mix64(spec.seed, mixture_index));

  Mixture mix;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "mix_%04llu",
                  static_cast<unsigned long long>(mixture_index));
    mix.id = buf;
  }
  mix.annotation.recording_id = mix.id;

  std::vector<std::size_t> candidates;
  if (spec.wav_mode()) {
    for (std::size_t i = 0; i < spec.wav_pools.size(); ++i) candidates.push_back(i);
  } else if (!spec.inventory_subset.empty()) {
    for (int i : spec.inventory_subset)
      candidates.push_back(static_cast<std::size_t>(i));
  } else {
    for (int i = 0; i < spec.inventory_size; ++i)
      candidates.push_back(static_cast<std::size_t>(i));
  }
  std::vector<std::size_t> chosen = rng.sample_without_replacement(
      candidates, static_cast<std::size_t>(spec.num_speakers));

  std::vector<detail::PlacedUtterance> placed;
  double duration = spec.target_duration_s;

  for (std::size_t inv : chosen) {
    std::string label;
    std::vector<std::size_t> pool_order;  // WAV mode draw order
    if (spec.wav_mode()) {
      label = spec.wav_pools[inv].speaker;
      pool_order.resize(spec.wav_pools[inv].paths.size());
      for (std::size_t i = 0; i < pool_order.size(); ++i) pool_order[i] = i;
      rng.shuffle(pool_order);
    } else {
      label = speaker_label(static_cast<int>(inv));
    }
    mix.speaker_ids[label] = static_cast<int>(inv);

    // Alternate silences and utterances until the timeline covers the target;
    // the final utterance may overrun it.
    double t = rng.exponential(spec.beta_s);
    std::size_t u = 0;
    while (t < spec.target_duration_s) {
      detail::PlacedUtterance p;
      p.label = label;
      p.start = t;
      if (spec.wav_mode()) {
        if (u >= pool_order.size()) {
          throw DataError("simulate: speaker '" + label +
                          "' exhausted its pool at " + std::to_string(t) +
                          " s before the target duration");
        }
        p.wav_path = spec.wav_pools[inv].paths[pool_order[u]];
        WavData wav = read_wav(p.wav_path);
        if (wav.sample_rate != spec.sample_rate) {
          throw DataError("simulate: " + p.wav_path + " has sample rate " +
                          std::to_string(wav.sample_rate) + ", want " +
                          std::to_string(spec.sample_rate));
        }
        if (wav.samples.empty())
          throw DataError("simulate: empty WAV: " + p.wav_path);
        p.length = static_cast<double>(wav.samples.size()) / spec.sample_rate;
      } else {
        p.length = rng.log_normal(spec.utterance_median_s,
                                  spec.utterance_log_sigma);
      }
      t += p.length + rng.exponential(spec.beta_s);
      ++u;
      duration = std::max(duration, p.start + p.length);
      placed.push_back(std::move(p));
    }
  }

  for (const detail::PlacedUtterance& p : placed) {
    mix.annotation.turns.push_back(
        Turn{p.label, Interval(p.start, p.start + p.length)});
  }
  mix.annotation = canonicalize(mix.annotation);
  mix.duration_s = duration;
  if (placements) *placements = std::move(placed);
  return mix;
}

// Full mixture: annotation plus synthesized features (and samples in WAV mode).
inline Mixture simulate_mixture(const SimulationSpec& spec,
                                std::uint64_t mixture_index) {
  std::vector<detail::PlacedUtterance> placed;
  Mixture mix = simulate_annotation(spec, mixture_index, &placed);

  if (spec.wav_mode()) {
    auto total = static_cast<std::size_t>(std::ceil(
        mix.duration_s * static_cast<double>(spec.sample_rate)));
    total = std::max(total, static_cast<std::size_t>(spec.frame_size));
    mix.samples.assign(total, 0.0);
    for (const detail::PlacedUtterance& p : placed) {
      WavData wav = read_wav(p.wav_path);
      auto offset = static_cast<std::size_t>(
          std::llround(p.start * static_cast<double>(spec.sample_rate)));
      for (std::size_t i = 0; i < wav.samples.size() && offset + i < total; ++i)
        mix.samples[offset + i] += wav.samples[i];
    }
    mix.features = stft_features(mix.samples, spec.sample_rate, spec.frame_size,
                                 spec.frame_shift_samples);
  } else {
    SyntheticSpeakerSpec gen = spec.generator;
    gen.num_speakers = spec.inventory_size;
    auto frames = static_cast<std::size_t>(
        std::ceil(mix.duration_s / spec.frame_shift_s));
    mix.features =
        synthetic_features(gen, mix.annotation, mix.speaker_ids, frames,
                           mix64(spec.seed, mixture_index, 0x5eedull),
                           spec.frame_shift_s);
  }
  mix.features.recording_id = mix.id;
  return mix;
}

// ---- corpus building ----

struct CorpusResult {
  std::vector<ManifestEntry> manifest;
  OverlapStats stats;                       // corpus-level sums and ratio
  std::set<std::string> speakers;           // labels used anywhere
  std::map<std::string, int> speaker_ids;   // label -> inventory index
  std::string manifest_path;
};

// Splits the synthetic inventory into disjoint train/dev speaker sets.
inline std::pair<std::vector<int>, std::vector<int>> split_inventory(
    int inventory_size, double train_fraction, std::uint64_t seed) {
  if (inventory_size < 2)
    throw ConfigError("split_inventory: need at least 2 speakers");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("split_inventory: train_fraction must be in (0,1)");
  std::vector<int> ids(static_cast<std::size_t>(inventory_size));
  for (int i = 0; i < inventory_size; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(mix64(seed, 0x5917ull));
  rng.shuffle(ids);
  auto cut = static_cast<std::size_t>(
      std::llround(train_fraction * inventory_size));
  cut = std::min(std::max<std::size_t>(cut, 1),
                 static_cast<std::size_t>(inventory_size) - 1);
  std::vector<int> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<int> dev(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end());
  std::sort(train.begin(), train.end());
  std::sort(dev.begin(), dev.end());
  return {train, dev};
}

// Restricts a spec to a subset of the synthetic inventory. Mixture speaker
// labels keep their global inventory indices, so disjoint subsets yield
// corpora that share no speaker.
inline SimulationSpec restrict_to_speakers(SimulationSpec spec,
                                           const std::vector<int>& subset) {
  if (spec.wav_mode())
    throw ConfigError("restrict_to_speakers: synthetic mode only");
  if (subset.empty()) throw ConfigError("restrict_to_speakers: empty subset");
  spec.inventory_subset = subset;
  spec.validate();
  return spec;
}

// Corpus-level overlap ratio from annotations alone (no feature synthesis);
// cheap enough for trend studies over many corpora.
inline OverlapStats corpus_overlap_stats(const SimulationSpec& spec) {
  OverlapStats total;
  total.t_spk_ge1 = 0.0;
  total.t_spk_ge2 = 0.0;
  for (int m = 0; m < spec.num_mixtures; ++m) {
    Annotation a =
        simulate_annotation(spec, static_cast<std::uint64_t>(m)).annotation;
    if (a.empty()) continue;  // huge beta can leave a mixture silent
    OverlapStats s = overlap_stats(a);
    total.t_spk_ge1 += s.t_spk_ge1;
    total.t_spk_ge2 += s.t_spk_ge2;
  }
  total.overlap_ratio =
      total.t_spk_ge1 > 0 ? total.t_spk_ge2 / total.t_spk_ge1 : 0.0;
  return total;
}

// Writes <id>.feat and <id>.rttm per mixture plus manifest.tsv and stats.txt
// under `dir`. Refuses to overwrite an existing manifest.
inline CorpusResult build_corpus(const SimulationSpec& spec,
                                 const std::string& dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string manifest_path = (fs::path(dir) / "manifest.tsv").string();
  if (fs::exists(manifest_path)) {
    throw IoError("build_corpus: refusing to overwrite " + manifest_path);
  }

  CorpusResult out;
  out.manifest_path = manifest_path;
  OverlapStats total;
  total.t_spk_ge1 = 0.0;
  total.t_spk_ge2 = 0.0;
  // The manifest file stores artifact names relative to itself, so a corpus
  // is byte-identical regardless of the output directory and survives moves;
  // the returned entries carry directly usable paths.
  std::vector<ManifestEntry> relative;
  std::vector<Annotation> annotations;
  for (int m = 0; m < spec.num_mixtures; ++m) {
    Mixture mix = simulate_mixture(spec, static_cast<std::uint64_t>(m));
    std::string feat_path = (fs::path(dir) / (mix.id + ".feat")).string();
    std::string rttm_path = (fs::path(dir) / (mix.id + ".rttm")).string();
    write_features(mix.features, feat_path);
    write_rttm(mix.annotation, rttm_path);
    out.manifest.push_back(
        ManifestEntry{mix.id, feat_path, rttm_path, mix.duration_s});
    relative.push_back(ManifestEntry{mix.id, mix.id + ".feat",
                                     mix.id + ".rttm", mix.duration_s});
    if (!mix.annotation.empty()) {
      OverlapStats s = overlap_stats(mix.annotation);
      total.t_spk_ge1 += s.t_spk_ge1;
      total.t_spk_ge2 += s.t_spk_ge2;
    }
    for (const auto& [label, inv] : mix.speaker_ids) {
      out.speakers.insert(label);
      out.speaker_ids[label] = inv;
    }
  }
  total.overlap_ratio = total.t_spk_ge1 > 0 ? total.t_spk_ge2 / total.t_spk_ge1 : 0.0;
  out.stats = total;
  write_manifest(relative, manifest_path);

  ConfigMap stats;
  stats.set("num_mixtures", spec.num_mixtures);
  stats.set("beta_s", spec.beta_s);
  stats.set("t_spk_ge1_s", total.t_spk_ge1);
  stats.set("t_spk_ge2_s", total.t_spk_ge2);
  stats.set("overlap_ratio", total.overlap_ratio);
  stats.set("num_speakers_used", static_cast<std::int64_t>(out.speakers.size()));
  stats.save((fs::path(dir) / "stats.txt").string());
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_SIMULATE_HPP_
