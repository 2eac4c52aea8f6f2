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
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "rpdiar/model.hpp"

using namespace rpdiar;

namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

// Tiny geometry: (17, 32) input -> (3, 4, 8) map, 4 frames per step,
// 24 anchors. Small enough for exhaustive finite differences.
ModelConfig micro_config() {
  ModelConfig c;
  c.freq_bins = 17;
  c.chunk_frames = 32;
  c.channels = {2, 3};
  c.stride_freq = {2, 2};
  c.stride_time = {2, 2};
  c.pad_freq = {1, 0};
  c.pad_time = {1, 1};
  c.rpn_channels = 4;
  c.anchor_sizes = {1, 2, 4};
  c.pre_nms_top_n = 50;
  c.train_proposals = 16;
  c.eval_proposals = 8;
  c.roi_bins = 2;
  c.fc_dim = 8;
  c.embedding_dim = 6;
  c.num_speakers = 3;
  c.rpn_batch = 16;
  c.roi_batch = 8;
  c.learning_rate = 0.005;
  c.lr_decay_steps = {};
  c.seed = 11;
  return c;
}

FeatureChunk random_chunk(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t bins = static_cast<std::size_t>(cfg.freq_bins);
  const std::size_t frames = static_cast<std::size_t>(cfg.chunk_frames);
  std::vector<double> data(bins * frames);
  for (auto& v : data) v = rng.uniform(0.0, 1.0);
  FeatureChunk ch;
  ch.matrix = Tensor::from_data({bins, frames}, std::move(data));
  ch.frame_shift_s = cfg.frame_shift_s;
  ch.recording_id = "probe";
  ch.valid_frames = frames;
  return ch;
}

const std::map<std::string, int>& micro_speakers() {
  static const std::map<std::string, int> m{{"alice", 0}, {"bob", 1}, {"carol", 2}};
  return m;
}

Annotation micro_truth_a() {
  Annotation a;
  a.turns.push_back(Turn{"alice", Interval(2.0, 14.0)});
  a.turns.push_back(Turn{"bob", Interval(10.0, 26.0)});
  return canonicalize(a);
}

Annotation micro_truth_b() {
  Annotation a;
  a.turns.push_back(Turn{"carol", Interval(4.0, 20.0)});
  a.turns.push_back(Turn{"alice", Interval(24.0, 31.0)});
  return canonicalize(a);
}

std::vector<TrainExample> micro_batch(const ModelConfig& cfg) {
  return {TrainExample{random_chunk(cfg, 301), micro_truth_a()},
          TrainExample{random_chunk(cfg, 302), micro_truth_b()}};
}

void require_same_prediction(const ChunkPrediction& x, const ChunkPrediction& y) {
  REQUIRE(x.proposals.size() == y.proposals.size());
  for (std::size_t i = 0; i < x.proposals.size(); ++i) {
    REQUIRE(x.proposals.intervals[i].start == y.proposals.intervals[i].start);
    REQUIRE(x.proposals.intervals[i].end == y.proposals.intervals[i].end);
    REQUIRE(x.proposals.scores[i] == y.proposals.scores[i]);
    REQUIRE(x.proposals.embeddings[i] == y.proposals.embeddings[i]);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("default geometry matches the documented full-scale layout") {
  ModelConfig cfg;
  MapGeometry geo = feature_map_geometry(cfg);
  REQUIRE(geo.channels == 64);
  REQUIRE(geo.freq_cells == 16);
  REQUIRE(geo.timesteps == 63);
  REQUIRE(geo.frames_per_step == 16);
}

TEST_CASE("full-scale forward emits bounded in-chunk proposals deterministically") {
  ModelConfig cfg;
  cfg.num_speakers = 4;
  cfg.seed = 3;
  Model m(cfg);
  REQUIRE(m.anchor_grid().size() == 567);
  double min_len = 1e18, max_len = 0.0;
  for (const Interval& a : m.anchor_grid().anchors) {
    min_len = std::min(min_len, a.length());
    max_len = std::max(max_len, a.length());
  }
  REQUIRE(min_len == 16.0);
  REQUIRE(max_len == 1024.0);

  FeatureChunk ch = random_chunk(cfg, 99);
  ChunkPrediction pred = m.predict(ch);
  REQUIRE(pred.proposals.size() >= 1);
  REQUIRE(pred.proposals.size() <= cfg.eval_proposals);
  for (std::size_t i = 0; i < pred.proposals.size(); ++i) {
    REQUIRE(pred.proposals.intervals[i].start >= 0.0);
    REQUIRE(pred.proposals.intervals[i].end <= 1000.0);
    REQUIRE(pred.proposals.embeddings[i].size() == 128);
  }
  require_same_prediction(pred, m.predict(ch));
}

TEST_CASE("micro config stays inside the finite-difference parameter budget") {
  Model m(micro_config());
  REQUIRE(m.num_parameters() == 476);
  REQUIRE(m.num_parameters() <= 5000);
  REQUIRE(m.parameter_names().size() == 20);
}

TEST_CASE("config text form round-trips every field") {
  ModelConfig c = micro_config();
  c.lr_decay_steps = {120, 240};
  ConfigMap m = to_config_map(c);
  ModelConfig back = model_config_from_map(ConfigMap::parse(m.serialize()));
  REQUIRE(to_config_map(back).serialize() == m.serialize());

  ModelConfig defaults;
  REQUIRE(to_config_map(model_config_from_map(ConfigMap{})).serialize() ==
          to_config_map(defaults).serialize());
}

TEST_CASE("config validation rejects inconsistent layouts") {
  ModelConfig c = micro_config();
  c.stride_time = {2};
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.freq_bins = 0;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.fg_iou = 0.2;  // below bg_iou
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.momentum = 1.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = micro_config();
  c.freq_bins = 1;
  c.pad_freq = {0, 0};  // kernel no longer fits
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward rejects mismatched chunk geometry") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  ModelConfig wrong = cfg;
  wrong.freq_bins = 16;
  REQUIRE_THROWS_AS(m.predict(random_chunk(wrong, 1)), DimensionError);
}

TEST_CASE("full micro-model gradient matches central finite differences") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  const std::vector<TrainExample> batch = micro_batch(cfg);
  const std::uint64_t sample_seed = 77;

  // Proposal coordinates are constants to the loss; pinning the kept lists
  // makes finite differences evaluate the same function as backward.
  std::vector<std::vector<Interval>> pinned;
  for (const TrainExample& ex : batch)
    pinned.push_back(m.decode_train_proposals(ex.chunk));

  LossBreakdown parts =
      m.compute_loss(batch, micro_speakers(), sample_seed, true, &pinned);
  REQUIRE(parts.total() > 0.0);
  std::map<std::string, std::vector<double>> analytic;
  for (const std::string& name : m.parameter_names())
    analytic[name] = m.parameter(name).grad();

  const double eps = 1e-5;
  double max_rel = 0.0;
  std::size_t checked = 0;
  for (const std::string& name : m.parameter_names()) {
    Tensor p = m.parameter(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.values()[i];
      p.values()[i] = orig + eps;
      const double up =
          m.compute_loss(batch, micro_speakers(), sample_seed, false, &pinned).total();
      p.values()[i] = orig - eps;
      const double dn =
          m.compute_loss(batch, micro_speakers(), sample_seed, false, &pinned).total();
      p.values()[i] = orig;
      const double fd = (up - dn) / (2.0 * eps);
      const double an = analytic[name][i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      INFO(name << "[" << i << "]: fd=" << fd << " analytic=" << an);
      REQUIRE(rel <= 1e-4);
      max_rel = std::max(max_rel, rel);
      ++checked;
    }
  }
  REQUIRE(checked == m.num_parameters());
  INFO("max relative error " << max_rel);
  REQUIRE(max_rel <= 1e-4);
}

TEST_CASE("empty annotations zero the regression and speaker terms") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  std::vector<TrainExample> batch{TrainExample{random_chunk(cfg, 41), Annotation{}}};
  LossBreakdown parts = m.compute_loss(batch, micro_speakers(), 5, false);
  REQUIRE(parts.rpn_reg == 0.0);
  REQUIRE(parts.rcnn_reg == 0.0);
  REQUIRE(parts.spk_cls == 0.0);
  REQUIRE(parts.rpn_cls > 0.0);
  REQUIRE(parts.rcnn_cls > 0.0);
  // near-zero logits at init put both classification terms near log 2
  REQUIRE(std::abs(parts.rpn_cls - std::log(2.0)) < 0.1);
  REQUIRE(std::abs(parts.rcnn_cls - std::log(2.0)) < 0.1);
}

TEST_CASE("initial speaker loss sits near the uniform-distribution value") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  LossBreakdown parts = m.compute_loss(micro_batch(cfg), micro_speakers(), 9, false);
  REQUIRE(parts.spk_cls > 0.0);
  REQUIRE(std::abs(parts.spk_cls - std::log(3.0)) < 0.2);
}

TEST_CASE("training on a fixed toy batch drives the smoothed loss down") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  const std::vector<TrainExample> batch = micro_batch(cfg);
  std::vector<double> totals;
  for (int s = 0; s < 50; ++s)
    totals.push_back(m.train_step(batch, micro_speakers()).total());
  REQUIRE(m.step() == 50);
  const double head =
      std::accumulate(totals.begin(), totals.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(totals.end() - 10, totals.end(), 0.0) / 10.0;
  INFO("smoothed first 10 " << head << " vs last 10 " << tail);
  REQUIRE(tail < head);
}

TEST_CASE("learning rate decays by ten at each configured step") {
  ModelConfig cfg = micro_config();
  cfg.lr_decay_steps = {2, 4};
  Model m(cfg);
  const std::vector<TrainExample> batch = {
      TrainExample{random_chunk(cfg, 77), micro_truth_a()}};
  REQUIRE(m.current_learning_rate() == Catch::Approx(0.005));
  for (int s = 0; s < 2; ++s) m.train_step(batch, micro_speakers());
  REQUIRE(m.current_learning_rate() == Catch::Approx(0.0005));
  for (int s = 0; s < 2; ++s) m.train_step(batch, micro_speakers());
  REQUIRE(m.current_learning_rate() == Catch::Approx(0.00005));
}

TEST_CASE("checkpoint round-trip restores state bit-exactly") {
  const std::string path = temp_path("rpdiar_model_ckpt.bin");
  ModelConfig cfg = micro_config();
  Model m(cfg);
  const std::vector<TrainExample> batch = micro_batch(cfg);
  for (int s = 0; s < 5; ++s) m.train_step(batch, micro_speakers());
  m.save_checkpoint(path);

  Model back = Model::load_checkpoint(path);
  REQUIRE(back.step() == 5);
  REQUIRE(back.num_parameters() == m.num_parameters());
  for (const std::string& name : m.parameter_names()) {
    REQUIRE(back.parameter(name).values() == m.parameter(name).values());
  }
  FeatureChunk probe = random_chunk(cfg, 500);
  require_same_prediction(m.predict(probe), back.predict(probe));

  // momentum state survives: one more identical step stays in lockstep
  m.train_step(batch, micro_speakers());
  back.train_step(batch, micro_speakers());
  for (const std::string& name : m.parameter_names()) {
    REQUIRE(back.parameter(name).values() == m.parameter(name).values());
  }
  fs::remove(path);
}

TEST_CASE("checkpoint rejects corruption, version drift, and foreign geometry") {
  const std::string path = temp_path("rpdiar_model_ckpt_bad.bin");
  ModelConfig cfg = micro_config();
  Model m(cfg);
  m.save_checkpoint(path);
  const std::string good = read_file(path);

  std::string bad = good;
  bad[0] = 'X';
  write_file(path, bad);
  REQUIRE_THROWS_AS(Model::load_checkpoint(path), IoError);

  bad = good;
  bad[8] = 2;  // format version
  write_file(path, bad);
  REQUIRE_THROWS_AS(Model::load_checkpoint(path), IoError);

  write_file(path, good.substr(0, good.size() - 12));
  REQUIRE_THROWS_AS(Model::load_checkpoint(path), IoError);

  write_file(path, good);
  ModelConfig other = cfg;
  other.channels = {2, 4};
  Model foreign(other);
  REQUIRE_THROWS_AS(foreign.load_parameters(path), ConfigError);

  other = cfg;
  other.num_speakers = 5;
  Model wrong_k(other);
  REQUIRE_THROWS_AS(wrong_k.load_parameters(path), ConfigError);
  fs::remove(path);
}

TEST_CASE("adaptation swaps the speaker head and nothing else") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  const std::vector<TrainExample> batch = micro_batch(cfg);
  for (int s = 0; s < 3; ++s) m.train_step(batch, micro_speakers());

  FeatureChunk probe = random_chunk(cfg, 600);
  ChunkPrediction before = m.predict(probe);
  m.configure_for_adaptation(5);
  REQUIRE(m.config().num_speakers == 5);
  REQUIRE(m.config().alpha == Catch::Approx(0.1));
  REQUIRE(m.config().learning_rate == Catch::Approx(4e-5));
  REQUIRE(m.config().lr_decay_steps.empty());
  REQUIRE(m.step() == 0);
  REQUIRE(m.parameter("head.spk.w").shape() ==
          std::vector<std::size_t>{5, static_cast<std::size_t>(cfg.embedding_dim)});

  // non-speaker outputs are upstream of the swapped head
  require_same_prediction(before, m.predict(probe));

  std::map<std::string, int> wide{{"alice", 0}, {"bob", 1}, {"carol", 2},
                                  {"dave", 3}, {"erin", 4}};
  LossBreakdown parts = m.compute_loss(batch, wide, 3, false);
  REQUIRE(std::abs(parts.spk_cls - std::log(5.0)) < 0.2);
  m.train_step(batch, wide);
  REQUIRE(m.step() == 1);
}

TEST_CASE("compute_loss validates the speaker id map") {
  ModelConfig cfg = micro_config();
  Model m(cfg);
  const std::vector<TrainExample> batch = micro_batch(cfg);
  REQUIRE_THROWS_AS(m.compute_loss(batch, {}, 1, false), ConfigError);
  std::map<std::string, int> out_of_range{{"alice", 0}, {"bob", 1}, {"carol", 3}};
  REQUIRE_THROWS_AS(m.compute_loss(batch, out_of_range, 1, false), ConfigError);
  std::map<std::string, int> missing{{"alice", 0}, {"carol", 2}};
  REQUIRE_THROWS_AS(m.compute_loss(batch, missing, 1, false), DataError);
}

TEST_CASE("example_for_chunk crops and rescales to chunk-local frames") {
  ModelConfig cfg = micro_config();
  FeatureChunk ch = random_chunk(cfg, 8);
  ch.origin_frames = 100;
  Annotation secs;
  secs.turns.push_back(Turn{"a", Interval(1.10, 1.25)});  // frames [110, 125)
  secs.turns.push_back(Turn{"b", Interval(0.50, 0.90)});  // before the window
  secs.turns.push_back(Turn{"a", Interval(1.30, 1.50)});  // clipped at the end
  TrainExample ex = example_for_chunk(ch, secs);
  REQUIRE(ex.truth.turns.size() == 2);
  REQUIRE(ex.truth.turns[0].speaker == "a");
  REQUIRE(ex.truth.turns[0].span.start == Catch::Approx(10.0));
  REQUIRE(ex.truth.turns[0].span.end == Catch::Approx(25.0));
  REQUIRE(ex.truth.turns[1].span.start == Catch::Approx(30.0));
  REQUIRE(ex.truth.turns[1].span.end == Catch::Approx(32.0));
}
