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
//
// rpdiar command line tool.
//
// Subcommands: simulate, train, adapt, infer, score, stats. Settings come
// from built-in defaults, then an optional --config file, then explicit
// flags (later wins). Commands with an output directory echo the fully
// resolved configuration there, so any run is reproducible from the echoed
// file plus its inputs. Exit codes: 0 success, 1 usage or configuration
// error, 2 data or I/O error.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/config.hpp"
#include "rpdiar/features.hpp"
#include "rpdiar/interval.hpp"
#include "rpdiar/io.hpp"
#include "rpdiar/model.hpp"
#include "rpdiar/pipeline.hpp"
#include "rpdiar/rng.hpp"
#include "rpdiar/scoring.hpp"
#include "rpdiar/simulate.hpp"
#include "rpdiar/wav.hpp"

namespace fs = std::filesystem;

namespace {

// ---- shared plumbing ----

// Overlay of everything the user actually provided (file + flags), kept
// separate from the defaults so "absent" stays observable.
struct RunSettings {
  rpdiar::ConfigMap effective;  // defaults + file + flags
  rpdiar::ConfigMap provided;   // file + flags only
  bool was_provided(const std::string& key) const { return provided.has(key); }
};

RunSettings merge_settings(const rpdiar::ConfigMap& defaults,
                           const std::string& config_file,
                           const rpdiar::ConfigMap& flag_overrides) {
  RunSettings s;
  if (!config_file.empty()) {
    s.provided.merge_from(rpdiar::ConfigMap::load(config_file));
  }
  s.provided.merge_from(flag_overrides);
  s.effective = defaults;
  s.effective.merge_from(s.provided);
  return s;
}

void echo_config(const rpdiar::ConfigMap& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  cfg.save((fs::path(out_dir) / "config.txt").string());
}

// Feature loading dispatches on extension: .wav files are framed with the
// STFT front end, anything else is read as a stored feature matrix.
rpdiar::FeatureChunk load_entry_features(const rpdiar::ManifestEntry& entry,
                                         const std::string& manifest_path,
                                         int frame_size, int frame_shift,
                                         bool log_compress) {
  const std::string path = rpdiar::resolve_manifest_path(manifest_path, entry.feature_path);
  rpdiar::FeatureChunk feats;
  if (fs::path(path).extension() == ".wav") {
    rpdiar::WavData wav = rpdiar::read_wav(path);
    feats = rpdiar::stft_features(wav.samples, wav.sample_rate, frame_size,
                                  frame_shift, log_compress);
  } else {
    feats = rpdiar::read_features(path);
  }
  feats.recording_id = entry.id;
  return feats;
}

rpdiar::Annotation load_entry_reference(const rpdiar::ManifestEntry& entry,
                                        const std::string& manifest_path) {
  const std::string path = rpdiar::resolve_manifest_path(manifest_path, entry.rttm_path);
  std::map<std::string, rpdiar::Annotation> all = rpdiar::read_rttm(path);
  auto it = all.find(entry.id);
  if (it == all.end()) {
    throw rpdiar::DataError("reference " + path + " has no recording '" +
                            entry.id + "'");
  }
  return it->second;
}

std::string format_breakdown(std::uint64_t step, double lr,
                             const rpdiar::LossBreakdown& lb) {
  std::ostringstream os;
  os.setf(std::ios::fmtflags(0), std::ios::floatfield);
  os.precision(6);
  os << "step=" << step << " lr=" << lr << " rpn_cls=" << lb.rpn_cls
     << " rpn_reg=" << lb.rpn_reg << " rcnn_cls=" << lb.rcnn_cls
     << " rcnn_reg=" << lb.rcnn_reg << " spk_cls=" << lb.spk_cls
     << " total=" << lb.total();
  return os.str();
}

int env_default_jobs() {
  const char* env = std::getenv("RPDIAR_JOBS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || v < 1) {
    throw rpdiar::ConfigError(std::string("RPDIAR_JOBS must be a positive "
                                          "integer, got '") +
                              env + "'");
  }
  return static_cast<int>(v);
}

// ---- speaker count mode for clustering ----

struct SpeakerCountMode {
  enum Kind { kAuto, kOracle, kFixed } kind = kAuto;
  int k = 0;
};

SpeakerCountMode parse_speaker_count(const std::string& s) {
  SpeakerCountMode m;
  if (s == "auto") {
    m.kind = SpeakerCountMode::kAuto;
    return m;
  }
  if (s == "oracle") {
    m.kind = SpeakerCountMode::kOracle;
    return m;
  }
  try {
    std::size_t used = 0;
    int k = std::stoi(s, &used);
    if (used == s.size() && k >= 1) {
      m.kind = SpeakerCountMode::kFixed;
      m.k = k;
      return m;
    }
  } catch (const std::exception&) {
  }
  throw rpdiar::ConfigError("--num-speakers wants 'auto', 'oracle', or a "
                            "positive integer, got '" +
                            s + "'");
}

// ---- defaults ----

rpdiar::ConfigMap simulate_defaults() {
  rpdiar::ConfigMap m;
  rpdiar::SimulationSpec spec;
  m.set("sim.num_speakers", spec.num_speakers);
  m.set("sim.beta_s", spec.beta_s);
  m.set("sim.num_mixtures", spec.num_mixtures);
  m.set("sim.target_duration_s", spec.target_duration_s);
  m.set("sim.utterance_median_s", spec.utterance_median_s);
  m.set("sim.utterance_log_sigma", spec.utterance_log_sigma);
  m.set("sim.inventory_size", spec.inventory_size);
  m.set("sim.freq_bins", spec.generator.freq_bins);
  m.set("sim.frame_shift_s", spec.frame_shift_s);
  m.set("sim.seed", static_cast<std::int64_t>(spec.seed));
  m.set("sim.split", false);
  m.set("sim.train_fraction", 0.75);
  return m;
}

rpdiar::SimulationSpec spec_from_settings(const rpdiar::ConfigMap& cfg) {
  rpdiar::SimulationSpec spec;
  spec.num_speakers = static_cast<int>(cfg.get_int("sim.num_speakers"));
  spec.beta_s = cfg.get_double("sim.beta_s");
  spec.num_mixtures = static_cast<int>(cfg.get_int("sim.num_mixtures"));
  spec.target_duration_s = cfg.get_double("sim.target_duration_s");
  spec.utterance_median_s = cfg.get_double("sim.utterance_median_s");
  spec.utterance_log_sigma = cfg.get_double("sim.utterance_log_sigma");
  spec.inventory_size = static_cast<int>(cfg.get_int("sim.inventory_size"));
  spec.generator.freq_bins = static_cast<int>(cfg.get_int("sim.freq_bins"));
  spec.frame_shift_s = cfg.get_double("sim.frame_shift_s");
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("sim.seed"));
  return spec;
}

rpdiar::ConfigMap training_defaults() {
  rpdiar::ConfigMap m = rpdiar::to_config_map(rpdiar::ModelConfig{});
  m.set("train.steps", 500);
  m.set("train.batch_size", 2);
  m.set("train.checkpoint_every", 0);
  m.set("features.frame_size", 512);
  m.set("features.frame_shift", 80);
  m.set("features.log_compress", false);
  return m;
}

rpdiar::ConfigMap adapt_defaults() {
  rpdiar::ConfigMap m;
  m.set("adapt.steps", 200);
  m.set("adapt.batch_size", 2);
  m.set("adapt.learning_rate", 4e-5);
  m.set("adapt.alpha", 0.1);
  m.set("adapt.seed", 1);
  m.set("adapt.checkpoint_every", 0);
  m.set("features.frame_size", 512);
  m.set("features.frame_shift", 80);
  m.set("features.log_compress", false);
  return m;
}

rpdiar::ConfigMap infer_defaults() {
  rpdiar::ConfigMap m;
  rpdiar::PostprocessConfig pcfg;
  m.set("pipeline.gamma", pcfg.gamma);
  m.set("pipeline.nms_threshold", pcfg.nms_threshold);
  m.set("pipeline.num_speakers", std::string("auto"));
  m.set("pipeline.k_max", static_cast<std::int64_t>(pcfg.speaker_count.k_max));
  m.set("infer.jobs", env_default_jobs());
  m.set("features.frame_size", 512);
  m.set("features.frame_shift", 80);
  m.set("features.log_compress", false);
  return m;
}

rpdiar::ConfigMap score_defaults() {
  rpdiar::ConfigMap m;
  m.set("score.collars", std::string("0,0.1,0.25"));
  m.set("score.overlap", std::string("both"));
  m.set("score.frame_step_s", 0.001);
  return m;
}

// ---- training data assembly (shared by train and adapt) ----

struct Dataset {
  std::vector<rpdiar::TrainExample> examples;
  std::map<std::string, int> speaker_ids;  // dense, sorted labels -> [0, K)
  std::size_t freq_bins = 0;
  double frame_shift_s = 0.0;
  std::size_t num_recordings = 0;
};

Dataset load_training_data(const std::string& manifest_path,
                           std::size_t chunk_frames, int frame_size,
                           int frame_shift, bool log_compress) {
  std::vector<rpdiar::ManifestEntry> entries =
      rpdiar::read_manifest(manifest_path);
  if (entries.empty()) {
    throw rpdiar::DataError("empty manifest: " + manifest_path);
  }
  Dataset ds;
  ds.num_recordings = entries.size();
  std::set<std::string> labels;
  std::vector<std::pair<rpdiar::FeatureChunk, rpdiar::Annotation>> loaded;
  for (const rpdiar::ManifestEntry& e : entries) {
    rpdiar::FeatureChunk feats = load_entry_features(
        e, manifest_path, frame_size, frame_shift, log_compress);
    rpdiar::Annotation ref = load_entry_reference(e, manifest_path);
    if (ds.freq_bins == 0) {
      ds.freq_bins = feats.freq_bins();
      ds.frame_shift_s = feats.frame_shift_s;
    } else if (feats.freq_bins() != ds.freq_bins) {
      throw rpdiar::DataError("manifest mixes feature sizes: " + e.id +
                              " has " + std::to_string(feats.freq_bins()) +
                              " bins, expected " +
                              std::to_string(ds.freq_bins));
    }
    for (const std::string& spk : ref.speakers()) labels.insert(spk);
    loaded.emplace_back(std::move(feats), std::move(ref));
  }
  int next_id = 0;
  for (const std::string& spk : labels) ds.speaker_ids[spk] = next_id++;
  for (const auto& [feats, ref] : loaded) {
    for (const rpdiar::FeatureChunk& c :
         rpdiar::chunk_recording(feats, chunk_frames, chunk_frames)) {
      ds.examples.push_back(rpdiar::example_for_chunk(c, ref));
    }
  }
  return ds;
}

// Batch order is drawn from a seed-derived stream, so a run is repeatable
// from its config alone.
std::vector<rpdiar::TrainExample> draw_batch(const Dataset& ds,
                                             std::size_t batch_size,
                                             rpdiar::Rng& rng) {
  std::vector<rpdiar::TrainExample> batch;
  const std::size_t n = ds.examples.size();
  if (batch_size <= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t i : rng.sample_without_replacement(all, batch_size)) {
      batch.push_back(ds.examples[i]);
    }
  } else {
    for (std::size_t b = 0; b < batch_size; ++b) {
      batch.push_back(ds.examples[rng.bounded(n)]);
    }
  }
  return batch;
}

void run_training_loop(rpdiar::Model& model, const Dataset& ds, int steps,
                       int batch_size, int checkpoint_every,
                       std::uint64_t order_seed, const std::string& out_dir) {
  std::ofstream log((fs::path(out_dir) / "loss.log").string());
  if (!log) throw rpdiar::IoError("cannot write loss log under " + out_dir);
  rpdiar::Rng order_rng(rpdiar::mix64(order_seed, 0xba7cULL));
  for (int s = 1; s <= steps; ++s) {
    std::vector<rpdiar::TrainExample> batch =
        draw_batch(ds, static_cast<std::size_t>(batch_size), order_rng);
    double lr = model.current_learning_rate();
    rpdiar::LossBreakdown lb = model.train_step(batch, ds.speaker_ids);
    std::string line = format_breakdown(model.step(), lr, lb);
    log << line << '\n';
    if (s == 1 || s == steps || s % 50 == 0) {
      std::cout << line << std::endl;
    }
    if (checkpoint_every > 0 && s % checkpoint_every == 0 && s != steps) {
      char name[32];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", s);
      model.save_checkpoint((fs::path(out_dir) / name).string());
    }
  }
  if (!log) throw rpdiar::IoError("failed while writing loss log");
  model.save_checkpoint((fs::path(out_dir) / "final.ckpt").string());
}

void write_speaker_table(const std::map<std::string, int>& speaker_ids,
                         const std::string& out_dir) {
  std::ofstream out((fs::path(out_dir) / "speakers.tsv").string());
  if (!out) throw rpdiar::IoError("cannot write speakers.tsv under " + out_dir);
  for (const auto& [label, id] : speaker_ids) {
    out << label << '\t' << id << '\n';
  }
}

// ---- subcommand bodies ----

int run_simulate(const RunSettings& s, const std::string& out_dir) {
  rpdiar::SimulationSpec spec = spec_from_settings(s.effective);
  spec.validate();
  const bool split = s.effective.get_bool("sim.split");
  fs::create_directories(out_dir);
  if (split) {
    double fraction = s.effective.get_double("sim.train_fraction");
    auto [train_inv, dev_inv] =
        rpdiar::split_inventory(spec.inventory_size, fraction, spec.seed);
    rpdiar::SimulationSpec train_spec =
        rpdiar::restrict_to_speakers(spec, train_inv);
    rpdiar::SimulationSpec dev_spec =
        rpdiar::restrict_to_speakers(spec, dev_inv);
    dev_spec.seed = rpdiar::mix64(spec.seed, 0xdee5ULL);
    rpdiar::CorpusResult train_res = rpdiar::build_corpus(
        train_spec, (fs::path(out_dir) / "train").string());
    rpdiar::CorpusResult dev_res =
        rpdiar::build_corpus(dev_spec, (fs::path(out_dir) / "dev").string());
    std::cout << "train: " << train_res.manifest.size() << " mixtures, "
              << train_res.speakers.size() << " speakers, overlap ratio "
              << train_res.stats.overlap_ratio << '\n';
    std::cout << "dev:   " << dev_res.manifest.size() << " mixtures, "
              << dev_res.speakers.size() << " speakers, overlap ratio "
              << dev_res.stats.overlap_ratio << '\n';
  } else {
    rpdiar::CorpusResult res = rpdiar::build_corpus(spec, out_dir);
    std::cout << res.manifest.size() << " mixtures, " << res.speakers.size()
              << " speakers, overlap ratio " << res.stats.overlap_ratio
              << '\n';
  }
  echo_config(s.effective, out_dir);
  return 0;
}

int run_train(RunSettings& s, const std::string& data_path,
              const std::string& out_dir) {
  rpdiar::ModelConfig mcfg = rpdiar::model_config_from_map(s.effective);
  Dataset ds = load_training_data(
      data_path, static_cast<std::size_t>(mcfg.chunk_frames),
      static_cast<int>(s.effective.get_int("features.frame_size")),
      static_cast<int>(s.effective.get_int("features.frame_shift")),
      s.effective.get_bool("features.log_compress"));

  // Geometry not pinned by the user is adopted from the data; pinned
  // geometry must match it.
  if (!s.was_provided("model.freq_bins")) {
    mcfg.freq_bins = static_cast<int>(ds.freq_bins);
  } else if (static_cast<std::size_t>(mcfg.freq_bins) != ds.freq_bins) {
    throw rpdiar::ConfigError(
        "model.freq_bins is " + std::to_string(mcfg.freq_bins) +
        " but the training features have " + std::to_string(ds.freq_bins));
  }
  if (!s.was_provided("model.frame_shift_s")) {
    mcfg.frame_shift_s = ds.frame_shift_s;
  } else if (std::abs(mcfg.frame_shift_s - ds.frame_shift_s) > 1e-12) {
    throw rpdiar::ConfigError("model.frame_shift_s does not match the "
                              "training features");
  }
  const int num_labels = static_cast<int>(ds.speaker_ids.size());
  if (mcfg.num_speakers == 0) {
    mcfg.num_speakers = num_labels;
  } else if (num_labels > mcfg.num_speakers) {
    throw rpdiar::ConfigError(
        "training data has " + std::to_string(num_labels) +
        " speakers but model.num_speakers is " +
        std::to_string(mcfg.num_speakers));
  }
  mcfg.validate();

  rpdiar::Model model(mcfg);
  std::cout << "training on " << ds.examples.size() << " chunks from "
            << ds.num_recordings << " recordings, " << num_labels
            << " speakers, " << model.num_parameters() << " parameters\n";

  fs::create_directories(out_dir);
  // Echo the resolved config (adopted geometry included) before the loop.
  // Bind the map first: entries() references its owner.
  const rpdiar::ConfigMap resolved = rpdiar::to_config_map(mcfg);
  for (const auto& [k, v] : resolved.entries()) {
    s.effective.set(k, v);
  }
  echo_config(s.effective, out_dir);
  write_speaker_table(ds.speaker_ids, out_dir);

  run_training_loop(model, ds,
                    static_cast<int>(s.effective.get_int("train.steps")),
                    static_cast<int>(s.effective.get_int("train.batch_size")),
                    static_cast<int>(
                        s.effective.get_int("train.checkpoint_every")),
                    mcfg.seed, out_dir);
  std::cout << "wrote " << (fs::path(out_dir) / "final.ckpt").string() << '\n';
  return 0;
}

int run_adapt(RunSettings& s, const std::string& checkpoint_path,
              const std::string& data_path, const std::string& out_dir) {
  rpdiar::Model model = rpdiar::Model::load_checkpoint(checkpoint_path);
  const rpdiar::ModelConfig& mcfg = model.config();
  Dataset ds = load_training_data(
      data_path, static_cast<std::size_t>(mcfg.chunk_frames),
      static_cast<int>(s.effective.get_int("features.frame_size")),
      static_cast<int>(s.effective.get_int("features.frame_shift")),
      s.effective.get_bool("features.log_compress"));
  if (ds.freq_bins != static_cast<std::size_t>(mcfg.freq_bins)) {
    throw rpdiar::DataError(
        "adaptation features have " + std::to_string(ds.freq_bins) +
        " bins but the checkpoint expects " + std::to_string(mcfg.freq_bins));
  }
  const int num_labels = static_cast<int>(ds.speaker_ids.size());
  model.configure_for_adaptation(
      num_labels, s.effective.get_double("adapt.learning_rate"),
      s.effective.get_double("adapt.alpha"));
  std::cout << "adapting to " << num_labels << " speakers over "
            << ds.examples.size() << " chunks\n";

  fs::create_directories(out_dir);
  echo_config(s.effective, out_dir);
  write_speaker_table(ds.speaker_ids, out_dir);
  run_training_loop(
      model, ds, static_cast<int>(s.effective.get_int("adapt.steps")),
      static_cast<int>(s.effective.get_int("adapt.batch_size")),
      static_cast<int>(s.effective.get_int("adapt.checkpoint_every")),
      static_cast<std::uint64_t>(s.effective.get_int("adapt.seed")), out_dir);
  std::cout << "wrote " << (fs::path(out_dir) / "final.ckpt").string() << '\n';
  return 0;
}

int run_infer(const RunSettings& s, const std::string& checkpoint_path,
              const std::string& data_path, const std::string& out_dir) {
  rpdiar::Model model = rpdiar::Model::load_checkpoint(checkpoint_path);
  std::vector<rpdiar::ManifestEntry> entries = rpdiar::read_manifest(data_path);
  if (entries.empty()) throw rpdiar::DataError("empty manifest: " + data_path);

  SpeakerCountMode mode =
      parse_speaker_count(s.effective.get_string("pipeline.num_speakers"));
  rpdiar::PostprocessConfig pcfg;
  pcfg.gamma = s.effective.get_double("pipeline.gamma");
  pcfg.nms_threshold = s.effective.get_double("pipeline.nms_threshold");
  pcfg.speaker_count.k_max =
      static_cast<int>(s.effective.get_int("pipeline.k_max"));
  pcfg.validate();

  // Oracle counts come from the reference files listed in the manifest.
  std::vector<int> oracle_k(entries.size(), 0);
  if (mode.kind == SpeakerCountMode::kOracle) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      rpdiar::Annotation ref = load_entry_reference(entries[i], data_path);
      oracle_k[i] = static_cast<int>(ref.speakers().size());
    }
  }

  const int frame_size =
      static_cast<int>(s.effective.get_int("features.frame_size"));
  const int frame_shift =
      static_cast<int>(s.effective.get_int("features.frame_shift"));
  const bool log_compress = s.effective.get_bool("features.log_compress");

  struct RecordingResult {
    rpdiar::Annotation hypothesis;
    std::string log_line;
  };
  std::vector<RecordingResult> results(entries.size());

  auto process = [&](std::size_t i) {
    const rpdiar::ManifestEntry& e = entries[i];
    rpdiar::FeatureChunk feats = load_entry_features(
        e, data_path, frame_size, frame_shift, log_compress);
    const auto chunk_frames =
        static_cast<std::size_t>(model.config().chunk_frames);
    std::vector<rpdiar::FeatureChunk> chunks =
        rpdiar::chunk_recording(feats, chunk_frames, chunk_frames);
    std::vector<rpdiar::ProposalSet> sets;
    sets.reserve(chunks.size());
    for (const rpdiar::FeatureChunk& c : chunks) {
      sets.push_back(model.predict(c).proposals);
    }
    rpdiar::PostprocessConfig local = pcfg;
    if (mode.kind == SpeakerCountMode::kFixed) {
      local.num_speakers = mode.k;
    } else if (mode.kind == SpeakerCountMode::kOracle) {
      local.num_speakers = oracle_k[i];
    }
    rpdiar::PostprocessResult post =
        rpdiar::postprocess(sets, feats.frame_shift_s, local, e.id);
    rpdiar::Annotation hyp = std::move(post.annotation);
    if (e.duration_s > 0 && !hyp.empty()) {
      hyp = rpdiar::crop(hyp, rpdiar::Interval(0.0, e.duration_s));
    }
    std::ostringstream os;
    os << e.id << " chunks=" << chunks.size() << " k=" << post.k_used
       << " speech_s=" << hyp.total_turn_time();
    for (const std::string& w : post.warnings) os << " warn=\"" << w << '"';
    results[i] = RecordingResult{std::move(hyp), os.str()};
  };

  // Recordings are independent; workers pull indices from a shared counter
  // and results are aggregated in manifest order, so the output does not
  // depend on the jobs count.
  const int jobs =
      std::max(1, static_cast<int>(s.effective.get_int("infer.jobs")));
  const std::size_t n = entries.size();
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) process(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&]() {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          process(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
          next.store(n);
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    const int count = std::min<int>(jobs, static_cast<int>(n));
    pool.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  fs::create_directories(out_dir);
  echo_config(s.effective, out_dir);
  std::vector<rpdiar::Annotation> hyps;
  hyps.reserve(n);
  std::ofstream log((fs::path(out_dir) / "infer.log").string());
  if (!log) throw rpdiar::IoError("cannot write infer.log under " + out_dir);
  for (const RecordingResult& r : results) {
    hyps.push_back(r.hypothesis);
    log << r.log_line << '\n';
  }
  const std::string hyp_path = (fs::path(out_dir) / "hypothesis.rttm").string();
  rpdiar::write_rttm(hyps, hyp_path);
  std::cout << "wrote " << hyp_path << " (" << n << " recordings)\n";
  return 0;
}

int run_score(const RunSettings& s, const std::string& ref_path,
              const std::string& hyp_path, const std::string& out_dir) {
  std::map<std::string, rpdiar::Annotation> refs = rpdiar::read_rttm(ref_path);
  std::map<std::string, rpdiar::Annotation> hyps = rpdiar::read_rttm(hyp_path);
  if (refs.empty()) throw rpdiar::DataError("no reference turns in " + ref_path);
  for (const auto& [id, a] : hyps) {
    if (refs.find(id) == refs.end()) {
      std::cerr << "warning: hypothesis recording '" << id
                << "' has no reference; skipped\n";
    }
  }

  std::vector<double> collars;
  {
    std::stringstream ss(s.effective.get_string("score.collars"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      collars.push_back(rpdiar::detail::parse_double(tok, "score.collars"));
    }
    if (collars.empty()) {
      throw rpdiar::ConfigError("score.collars lists no collar values");
    }
  }
  const std::string overlap_mode = s.effective.get_string("score.overlap");
  std::vector<bool> overlap_options;
  if (overlap_mode == "both") {
    overlap_options = {true, false};
  } else if (overlap_mode == "scored") {
    overlap_options = {true};
  } else if (overlap_mode == "excluded") {
    overlap_options = {false};
  } else {
    throw rpdiar::ConfigError("score.overlap wants both|scored|excluded, got '" +
                              overlap_mode + "'");
  }

  std::ostringstream report;
  std::ostringstream keyvalues;
  for (double collar : collars) {
    for (bool score_overlap : overlap_options) {
      rpdiar::ScoringConfig cfg;
      cfg.collar_s = collar;
      cfg.score_overlap = score_overlap;
      cfg.frame_step_s = s.effective.get_double("score.frame_step_s");
      std::vector<rpdiar::ScoredRecording> rows;
      for (const auto& [id, ref] : refs) {
        rpdiar::Annotation hyp;
        hyp.recording_id = id;
        auto it = hyps.find(id);
        if (it != hyps.end()) hyp = it->second;
        rows.push_back(rpdiar::ScoredRecording{id, rpdiar::der(ref, hyp, cfg)});
      }
      rpdiar::DerReport total = rpdiar::aggregate_reports([&] {
        std::vector<rpdiar::DerReport> rs;
        for (const auto& r : rows) rs.push_back(r.report);
        return rs;
      }());
      report << "== collar " << collar << "s, overlap "
             << (score_overlap ? "scored" : "excluded") << " ==\n"
             << rpdiar::format_der_table(rows, total) << '\n';
      keyvalues << rpdiar::format_der_keyvalues(rows, total, cfg);
    }
  }
  std::cout << report.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    echo_config(s.effective, out_dir);
    std::ofstream table((fs::path(out_dir) / "score.txt").string());
    table << report.str();
    std::ofstream kv((fs::path(out_dir) / "score.kv").string());
    kv << keyvalues.str();
    if (!table || !kv) {
      throw rpdiar::IoError("failed while writing score report under " +
                            out_dir);
    }
  }
  return 0;
}

int run_stats(const RunSettings& s, const std::string& rttm_path,
              const std::string& data_path, const std::string& out_dir) {
  std::vector<std::pair<std::string, rpdiar::Annotation>> annotations;
  if (!rttm_path.empty()) {
    for (auto& [id, a] : rpdiar::read_rttm(rttm_path)) {
      annotations.emplace_back(id, std::move(a));
    }
  } else {
    for (const rpdiar::ManifestEntry& e : rpdiar::read_manifest(data_path)) {
      annotations.emplace_back(e.id, load_entry_reference(e, data_path));
    }
  }
  if (annotations.empty()) throw rpdiar::DataError("no recordings to analyze");

  std::ostringstream out;
  out << "recording            speech_s   overlap_s     ratio\n";
  double t1 = 0.0;
  double t2 = 0.0;
  auto emit = [&out](const std::string& id, const rpdiar::OverlapStats& st) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-18s %10.3f %11.3f %9.4f\n", id.c_str(),
                  st.t_spk_ge1, st.t_spk_ge2, st.overlap_ratio);
    out << line;
  };
  for (const auto& [id, a] : annotations) {
    if (a.empty()) {
      std::cerr << "warning: recording '" << id << "' has no speech; skipped\n";
      continue;
    }
    rpdiar::OverlapStats st = rpdiar::overlap_stats(a);
    emit(id, st);
    t1 += st.t_spk_ge1;
    t2 += st.t_spk_ge2;
  }
  rpdiar::OverlapStats total;
  total.t_spk_ge1 = t1;
  total.t_spk_ge2 = t2;
  total.overlap_ratio = t1 > 0 ? t2 / t1 : 0.0;
  emit("TOTAL", total);
  std::cout << out.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    echo_config(s.effective, out_dir);
    std::ofstream f((fs::path(out_dir) / "stats.txt").string());
    f << out.str();
    if (!f) throw rpdiar::IoError("failed while writing stats under " + out_dir);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rpdiar: region-proposal speaker diarization"};
  app.require_subcommand(1);

  // Shared state bound by the subcommand option sets.
  std::string config_file;
  std::string out_dir;
  std::string data_path;
  std::string checkpoint_path;
  std::string ref_path;
  std::string hyp_path;
  std::string rttm_path;
  std::int64_t seed = 0;
  std::int64_t steps = 0;
  std::int64_t batch = 0;
  std::int64_t num = 0;
  std::int64_t inventory = 0;
  std::int64_t sim_speakers = 0;
  std::int64_t jobs = 0;
  double beta = 0.0;
  double duration = 0.0;
  double train_fraction = 0.0;
  double lr = 0.0;
  double alpha = 0.0;
  double gamma = 0.0;
  double nms = 0.0;
  bool split = false;
  std::string cluster_speakers;
  std::vector<double> collar_values;
  bool score_overlap_flag = false;
  bool no_score_overlap_flag = false;

  auto add_common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--config", config_file,
                    "Configuration file (key = value lines)")
        ->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", out_dir, "Output directory");
    if (out_required) o->required();
  };

  CLI::App* sim = app.add_subcommand(
      "simulate", "Generate a synthetic diarization corpus");
  add_common(sim, true);
  sim->add_option("--beta", beta, "Mean silence gap in seconds");
  sim->add_option("--num", num, "Number of mixtures");
  sim->add_option("--num-speakers", sim_speakers, "Speakers per mixture");
  sim->add_option("--duration", duration, "Target duration per mixture (s)");
  sim->add_option("--inventory", inventory, "Synthetic speaker inventory size");
  sim->add_option("--seed", seed, "Corpus seed");
  sim->add_flag("--split", split,
                "Write train/ and dev/ corpora with disjoint speakers");
  sim->add_option("--train-fraction", train_fraction,
                  "Inventory fraction for the train split");

  CLI::App* train = app.add_subcommand("train", "Train a model from scratch");
  add_common(train, true);
  train->add_option("--data", data_path, "Training manifest (TSV)")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--steps", steps, "Training steps");
  train->add_option("--batch", batch, "Chunks per step");
  train->add_option("--lr", lr, "Initial learning rate");
  train->add_option("--alpha", alpha, "Speaker-loss weight");
  train->add_option("--seed", seed, "Model seed (init, sampling, batches)");

  CLI::App* adapt = app.add_subcommand(
      "adapt", "Adapt a trained model to a new speaker set");
  add_common(adapt, true);
  adapt->add_option("--checkpoint", checkpoint_path, "Input checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  adapt->add_option("--data", data_path, "Adaptation manifest (TSV)")
      ->required()
      ->check(CLI::ExistingFile);
  adapt->add_option("--steps", steps, "Adaptation steps");
  adapt->add_option("--batch", batch, "Chunks per step");
  adapt->add_option("--lr", lr, "Adaptation learning rate");
  adapt->add_option("--alpha", alpha, "Speaker-loss weight");
  adapt->add_option("--seed", seed, "Batch sampling seed");

  CLI::App* infer = app.add_subcommand(
      "infer", "Produce a hypothesis RTTM for a manifest");
  add_common(infer, true);
  infer->add_option("--checkpoint", checkpoint_path, "Model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  infer->add_option("--data", data_path, "Manifest of recordings (TSV)")
      ->required()
      ->check(CLI::ExistingFile);
  infer->add_option("--gamma", gamma, "Proposal score floor");
  infer->add_option("--nms", nms, "Cross-chunk NMS threshold");
  infer->add_option("--num-speakers", cluster_speakers,
                    "Clustering K: 'auto', 'oracle', or a number");
  infer->add_option("--jobs", jobs,
                    "Parallel recordings (default from RPDIAR_JOBS)");

  CLI::App* score = app.add_subcommand(
      "score", "Score a hypothesis RTTM against a reference");
  add_common(score, false);
  score->add_option("--ref", ref_path, "Reference RTTM")
      ->required()
      ->check(CLI::ExistingFile);
  score->add_option("--hyp", hyp_path, "Hypothesis RTTM")
      ->required()
      ->check(CLI::ExistingFile);
  score->add_option("--collar", collar_values,
                    "Scoring collar in seconds (repeatable)");
  score->add_flag("--score-overlap", score_overlap_flag,
                  "Score overlapping speech (only this mode)");
  score->add_flag("--no-score-overlap", no_score_overlap_flag,
                  "Exclude overlapping regions (only this mode)");

  CLI::App* stats = app.add_subcommand(
      "stats", "Report speech and overlap totals for annotations");
  add_common(stats, false);
  auto* stats_rttm = stats->add_option("--rttm", rttm_path, "RTTM file")
                         ->check(CLI::ExistingFile);
  auto* stats_data = stats->add_option("--data", data_path, "Manifest (TSV)")
                         ->check(CLI::ExistingFile);
  stats_rttm->excludes(stats_data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    rpdiar::ConfigMap flags;
    if (sim->parsed()) {
      if (sim->count("--beta")) flags.set("sim.beta_s", beta);
      if (sim->count("--num")) flags.set("sim.num_mixtures", num);
      if (sim->count("--num-speakers"))
        flags.set("sim.num_speakers", sim_speakers);
      if (sim->count("--duration")) flags.set("sim.target_duration_s", duration);
      if (sim->count("--inventory")) flags.set("sim.inventory_size", inventory);
      if (sim->count("--seed")) flags.set("sim.seed", seed);
      if (sim->count("--split")) flags.set("sim.split", split);
      if (sim->count("--train-fraction"))
        flags.set("sim.train_fraction", train_fraction);
      RunSettings s = merge_settings(simulate_defaults(), config_file, flags);
      return run_simulate(s, out_dir);
    }
    if (train->parsed()) {
      if (train->count("--steps")) flags.set("train.steps", steps);
      if (train->count("--batch")) flags.set("train.batch_size", batch);
      if (train->count("--lr")) flags.set("model.learning_rate", lr);
      if (train->count("--alpha")) flags.set("model.alpha", alpha);
      if (train->count("--seed")) flags.set("model.seed", seed);
      RunSettings s = merge_settings(training_defaults(), config_file, flags);
      return run_train(s, data_path, out_dir);
    }
    if (adapt->parsed()) {
      if (adapt->count("--steps")) flags.set("adapt.steps", steps);
      if (adapt->count("--batch")) flags.set("adapt.batch_size", batch);
      if (adapt->count("--lr")) flags.set("adapt.learning_rate", lr);
      if (adapt->count("--alpha")) flags.set("adapt.alpha", alpha);
      if (adapt->count("--seed")) flags.set("adapt.seed", seed);
      RunSettings s = merge_settings(adapt_defaults(), config_file, flags);
      return run_adapt(s, checkpoint_path, data_path, out_dir);
    }
    if (infer->parsed()) {
      if (infer->count("--gamma")) flags.set("pipeline.gamma", gamma);
      if (infer->count("--nms")) flags.set("pipeline.nms_threshold", nms);
      if (infer->count("--num-speakers"))
        flags.set("pipeline.num_speakers", cluster_speakers);
      if (infer->count("--jobs")) flags.set("infer.jobs", jobs);
      RunSettings s = merge_settings(infer_defaults(), config_file, flags);
      return run_infer(s, checkpoint_path, data_path, out_dir);
    }
    if (score->parsed()) {
      if (!collar_values.empty()) {
        std::ostringstream os;
        for (std::size_t i = 0; i < collar_values.size(); ++i) {
          if (i) os << ',';
          os << collar_values[i];
        }
        flags.set("score.collars", os.str());
      }
      if (score_overlap_flag && no_score_overlap_flag) {
        throw rpdiar::ConfigError(
            "--score-overlap and --no-score-overlap are exclusive");
      }
      if (score_overlap_flag) flags.set("score.overlap", std::string("scored"));
      if (no_score_overlap_flag)
        flags.set("score.overlap", std::string("excluded"));
      RunSettings s = merge_settings(score_defaults(), config_file, flags);
      return run_score(s, ref_path, hyp_path, out_dir);
    }
    if (stats->parsed()) {
      if (rttm_path.empty() && data_path.empty()) {
        throw rpdiar::ConfigError("stats wants --rttm or --data");
      }
      RunSettings s = merge_settings(rpdiar::ConfigMap{}, config_file, flags);
      return run_stats(s, rttm_path, data_path, out_dir);
    }
    throw rpdiar::ConfigError("no subcommand selected");
  } catch (const rpdiar::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const rpdiar::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const rpdiar::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const rpdiar::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
