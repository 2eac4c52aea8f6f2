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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "rpdiar/simulate.hpp"

using namespace rpdiar;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Per-speaker silence gaps recovered from the annotation: the lead-in before
// the first turn plus every inter-turn gap.
std::vector<double> speaker_gaps(const Annotation& a) {
  std::vector<double> gaps;
  for (const auto& [spk, spans] : a.by_speaker()) {
    gaps.push_back(spans.front().start);
    for (std::size_t i = 1; i < spans.size(); ++i)
      gaps.push_back(spans[i].start - spans[i - 1].end);
  }
  return gaps;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("simulation spec validation") {
  SimulationSpec spec;
  spec.beta_s = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SimulationSpec{};
  spec.num_speakers = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SimulationSpec{};
  spec.num_speakers = 30;
  spec.inventory_size = 20;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SimulationSpec{};
  spec.inventory_subset = {5, 99};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SimulationSpec{};
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("mixture timelines are well formed") {
  SimulationSpec spec;
  spec.seed = 404;
  for (std::uint64_t m = 0; m < 10; ++m) {
    Mixture mix = simulate_annotation(spec, m);
    REQUIRE_FALSE(mix.annotation.empty());
    CHECK(mix.annotation.recording_id == mix.id);
    CHECK(mix.speaker_ids.size() == 2);
    CHECK(mix.duration_s >= spec.target_duration_s);

    // per speaker: sequential utterances separated by positive gaps; each
    // synthesized utterance survives as exactly one turn
    for (const auto& [spk, spans] : mix.annotation.by_speaker()) {
      CHECK(spans.front().start > 0.0);
      CHECK(spans.front().start < spec.target_duration_s);
      for (std::size_t i = 0; i < spans.size(); ++i) {
        CHECK(spans[i].length() > 0.0);
        if (i > 0) CHECK(spans[i].start > spans[i - 1].end);
      }
      CHECK(mix.speaker_ids.count(spk) == 1);
    }
    // every turn ends by duration; the timeline reaches near the target
    for (const Turn& t : mix.annotation.turns)
      CHECK(t.span.end <= mix.duration_s + 1e-12);
  }
}

TEST_CASE("silence gaps have mean beta") {
  // >= 1e4 gaps; sample mean within 5% of beta
  for (double beta : {2.0, 5.0}) {
    SimulationSpec spec;
    spec.beta_s = beta;
    spec.seed = 7000 + static_cast<std::uint64_t>(beta);
    spec.target_duration_s = 120.0;
    std::vector<double> gaps;
    for (std::uint64_t m = 0; gaps.size() < 10000; ++m) {
      auto g = speaker_gaps(simulate_annotation(spec, m).annotation);
      gaps.insert(gaps.end(), g.begin(), g.end());
    }
    double mean = 0.0;
    for (double g : gaps) mean += g;
    mean /= static_cast<double>(gaps.size());
    INFO("beta " << beta << " sample mean " << mean << " over " << gaps.size()
                 << " gaps");
    CHECK(std::abs(mean - beta) <= 0.05 * beta);
  }
}

TEST_CASE("overlap ratio decreases in beta") {
  // medians over 20 corpora per beta, annotations only
  std::vector<double> medians;
  for (double beta : {2.0, 3.0, 5.0}) {
    std::vector<double> ratios;
    for (int c = 0; c < 20; ++c) {
      SimulationSpec spec;
      spec.beta_s = beta;
      spec.num_mixtures = 5;
      spec.seed = 1000 + static_cast<std::uint64_t>(c);
      ratios.push_back(corpus_overlap_stats(spec).overlap_ratio);
    }
    medians.push_back(median(ratios));
  }
  INFO("medians " << medians[0] << " " << medians[1] << " " << medians[2]);
  CHECK(medians[0] > medians[1]);
  CHECK(medians[1] > medians[2]);

  SECTION("large beta approaches the non-overlapping limit") {
    SimulationSpec spec;
    spec.beta_s = 50.0;
    spec.num_mixtures = 10;
    spec.seed = 3;
    CHECK(corpus_overlap_stats(spec).overlap_ratio < 0.05);
  }
}

TEST_CASE("simulation is deterministic under the seed") {
  SimulationSpec spec;
  spec.seed = 99;
  spec.target_duration_s = 20.0;
  Mixture a = simulate_mixture(spec, 4);
  Mixture b = simulate_mixture(spec, 4);
  REQUIRE(a.annotation.turns.size() == b.annotation.turns.size());
  for (std::size_t i = 0; i < a.annotation.turns.size(); ++i) {
    CHECK(a.annotation.turns[i].speaker == b.annotation.turns[i].speaker);
    CHECK(a.annotation.turns[i].span.start == b.annotation.turns[i].span.start);
    CHECK(a.annotation.turns[i].span.end == b.annotation.turns[i].span.end);
  }
  REQUIRE(a.features.matrix.size() == b.features.matrix.size());
  for (std::size_t i = 0; i < a.features.matrix.size(); ++i)
    REQUIRE(a.features.matrix[i] == b.features.matrix[i]);

  Mixture c = simulate_mixture(spec, 5);
  bool same = a.annotation.turns.size() == c.annotation.turns.size();
  if (same) {
    same = false;
    for (std::size_t i = 0; i < a.annotation.turns.size(); ++i)
      if (a.annotation.turns[i].span.start != c.annotation.turns[i].span.start)
        same = false;
  }
  CHECK_FALSE(same);
}

TEST_CASE("features match the synthetic generator contract") {
  SimulationSpec spec;
  spec.seed = 17;
  spec.target_duration_s = 12.0;
  Mixture mix = simulate_mixture(spec, 0);
  CHECK(mix.features.freq_bins() ==
        static_cast<std::size_t>(spec.generator.freq_bins));
  CHECK(mix.features.frames() ==
        static_cast<std::size_t>(std::ceil(mix.duration_s / spec.frame_shift_s)));
  CHECK(mix.features.recording_id == mix.id);
  for (std::size_t i = 0; i < mix.features.matrix.size(); ++i)
    REQUIRE(mix.features.matrix[i] >= 0.0);
}

TEST_CASE("corpus building") {
  SimulationSpec spec;
  spec.num_mixtures = 5;
  spec.target_duration_s = 10.0;
  spec.seed = 2718;
  std::string dir = fresh_dir("rpdiar_sim_corpus");
  CorpusResult corpus = build_corpus(spec, dir);

  SECTION("manifest lists every mixture with matching artifacts") {
    REQUIRE(corpus.manifest.size() == 5);
    auto entries = read_manifest(corpus.manifest_path);
    REQUIRE(entries.size() == 5);
    for (std::size_t m = 0; m < entries.size(); ++m) {
      CHECK(entries[m].id == corpus.manifest[m].id);
      // The manifest stores names relative to itself; resolution recovers
      // usable paths.
      std::string feat_path =
          resolve_manifest_path(corpus.manifest_path, entries[m].feature_path);
      std::string rttm_path =
          resolve_manifest_path(corpus.manifest_path, entries[m].rttm_path);
      REQUIRE(fs::exists(feat_path));
      REQUIRE(fs::exists(rttm_path));

      // RTTM and features round back to the generated mixture
      Mixture mix = simulate_mixture(spec, m);
      auto rttm = read_rttm(rttm_path);
      REQUIRE(rttm.count(mix.id) == 1);
      Annotation got = canonicalize(rttm.at(mix.id));
      REQUIRE(got.turns.size() == mix.annotation.turns.size());
      for (std::size_t i = 0; i < got.turns.size(); ++i) {
        CHECK(std::abs(got.turns[i].span.start -
                       mix.annotation.turns[i].span.start) <= 1e-3 + 1e-12);
        CHECK(got.turns[i].speaker == mix.annotation.turns[i].speaker);
      }
      FeatureChunk feats = read_features(feat_path);
      REQUIRE(feats.matrix.size() == mix.features.matrix.size());
      for (std::size_t i = 0; i < feats.matrix.size(); ++i)
        REQUIRE(feats.matrix[i] == mix.features.matrix[i]);
    }
  }
  SECTION("stats file carries the overlap summary") {
    ConfigMap stats = ConfigMap::load((fs::path(dir) / "stats.txt").string());
    CHECK(stats.get_int("num_mixtures") == 5);
    CHECK(stats.get_double("overlap_ratio") ==
          Catch::Approx(corpus.stats.overlap_ratio).margin(1e-12));
    CHECK(stats.get_double("t_spk_ge1_s") > 0.0);
  }
  SECTION("existing manifests are not overwritten") {
    CHECK_THROWS_AS(build_corpus(spec, dir), IoError);
  }
  SECTION("repeat builds are byte-identical") {
    std::string dir2 = fresh_dir("rpdiar_sim_corpus2");
    CorpusResult again = build_corpus(spec, dir2);
    for (std::size_t m = 0; m < corpus.manifest.size(); ++m) {
      CHECK(slurp(corpus.manifest[m].rttm_path) ==
            slurp(again.manifest[m].rttm_path));
      CHECK(slurp(corpus.manifest[m].feature_path) ==
            slurp(again.manifest[m].feature_path));
    }
    fs::remove_all(dir2);
  }
  fs::remove_all(dir);
}

TEST_CASE("train and dev corpora share no speaker") {
  auto [train_ids, dev_ids] = split_inventory(20, 0.7, 42);
  REQUIRE(train_ids.size() == 14);
  REQUIRE(dev_ids.size() == 6);
  std::set<int> seen(train_ids.begin(), train_ids.end());
  for (int i : dev_ids) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 20);

  // deterministic
  auto [t2, d2] = split_inventory(20, 0.7, 42);
  CHECK(t2 == train_ids);
  CHECK(d2 == dev_ids);

  SimulationSpec base;
  base.num_mixtures = 6;
  base.target_duration_s = 8.0;
  SimulationSpec train_spec = restrict_to_speakers(base, train_ids);
  SimulationSpec dev_spec = restrict_to_speakers(base, dev_ids);
  dev_spec.seed = base.seed + 1;

  std::set<std::string> train_spk, dev_spk;
  for (int m = 0; m < base.num_mixtures; ++m) {
    for (const auto& [label, id] : simulate_annotation(train_spec, m).speaker_ids)
      train_spk.insert(label);
    for (const auto& [label, id] : simulate_annotation(dev_spec, m).speaker_ids)
      dev_spk.insert(label);
  }
  REQUIRE_FALSE(train_spk.empty());
  REQUIRE_FALSE(dev_spk.empty());
  for (const std::string& s : train_spk) CHECK(dev_spk.count(s) == 0);
}

TEST_CASE("wav pool mode") {
  std::string dir = fresh_dir("rpdiar_sim_wav");
  // three speakers with distinct tones; lengths 0.4-0.9 s at 8 kHz
  SimulationSpec spec;
  spec.sample_rate = 8000;
  spec.beta_s = 1.0;
  spec.target_duration_s = 4.0;
  for (int s = 0; s < 3; ++s) {
    WavPool pool;
    pool.speaker = "real" + std::to_string(s);
    for (int u = 0; u < 8; ++u) {
      auto n = static_cast<std::size_t>(3200 + 800 * ((s + u) % 5));
      std::vector<double> tone(n);
      double freq = 200.0 * (s + 1);
      for (std::size_t i = 0; i < n; ++i)
        tone[i] = 0.3 * std::sin(2.0 * std::numbers::pi * freq *
                                 static_cast<double>(i) / 8000.0);
      std::string path = dir + "/s" + std::to_string(s) + "_u" +
                         std::to_string(u) + ".wav";
      write_wav(path, tone, 8000);
      pool.paths.push_back(path);
    }
    spec.wav_pools.push_back(std::move(pool));
  }
  spec.num_speakers = 2;

  SECTION("turn lengths equal pool file lengths") {
    Mixture mix = simulate_mixture(spec, 1);
    REQUIRE_FALSE(mix.annotation.empty());
    std::set<long> allowed;  // file lengths in samples
    for (int k = 0; k < 5; ++k) allowed.insert(3200 + 800 * k);
    for (const Turn& t : mix.annotation.turns) {
      long samples = std::lround(t.span.length() * 8000.0);
      CHECK(allowed.count(samples) == 1);
    }
    CHECK(mix.samples.size() >=
          static_cast<std::size_t>(mix.duration_s * 8000.0 - 1));
    CHECK(mix.features.freq_bins() == 257);
  }
  SECTION("speaker labels come from the pools") {
    Mixture mix = simulate_mixture(spec, 2);
    for (const auto& [label, id] : mix.speaker_ids) {
      CHECK(label.rfind("real", 0) == 0);
    }
  }
  SECTION("exhausted pools raise an error") {
    SimulationSpec tiny = spec;
    for (auto& pool : tiny.wav_pools) pool.paths.resize(1);
    tiny.target_duration_s = 300.0;
    CHECK_THROWS_AS(simulate_annotation(tiny, 0), DataError);
  }
  SECTION("sample-rate mismatches are rejected") {
    SimulationSpec wrong = spec;
    wrong.sample_rate = 16000;
    CHECK_THROWS_AS(simulate_annotation(wrong, 0), DataError);
  }
  fs::remove_all(dir);
}
