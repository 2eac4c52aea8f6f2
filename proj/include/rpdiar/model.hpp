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

#ifndef RPDIAR_MODEL_HPP_
#define RPDIAR_MODEL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpdiar/anchors.hpp"
#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/config.hpp"
#include "rpdiar/features.hpp"
#include "rpdiar/losses.hpp"
#include "rpdiar/proposals.hpp"
#include "rpdiar/rng.hpp"
#include "rpdiar/tensor.hpp"

namespace rpdiar {

// Full network description plus training hyper-parameters. The backbone is a
// stack of kernel-3 conv+relu blocks, one entry per block in the five
// parallel vectors. Derived feature-map geometry comes from
// feature_map_geometry(); anchor sizes are in timestep units.
struct ModelConfig {
  // input geometry
  int freq_bins = 257;
  int chunk_frames = 1000;
  double frame_shift_s = 0.01;
  // backbone blocks
  std::vector<int> channels = {8, 16, 32, 64};
  std::vector<int> stride_freq = {2, 2, 2, 2};
  std::vector<int> stride_time = {2, 2, 2, 2};
  std::vector<int> pad_freq = {1, 1, 1, 0};
  std::vector<int> pad_time = {1, 1, 1, 1};
  // proposal network
  int rpn_channels = 64;
  std::vector<int> anchor_sizes = {1, 2, 4, 8, 16, 24, 32, 48, 64};
  std::size_t pre_nms_top_n = 300;
  double rpn_nms_threshold = 0.7;
  std::size_t train_proposals = 100;
  std::size_t eval_proposals = 50;
  // second stage
  int roi_bins = 7;
  int fc_dim = 256;
  int embedding_dim = 128;
  int num_speakers = 0;  // 0 disables the speaker head (inference-only)
  // target assignment and sampling
  double fg_iou = 0.7;
  double bg_iou = 0.3;
  std::size_t rpn_batch = 128;
  std::size_t roi_batch = 64;
  double rpn_fg_fraction = 0.5;
  double roi_fg_fraction = 0.5;
  // optimization
  double alpha = 1.0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::vector<std::size_t> lr_decay_steps = {4000, 6000};  // each decays x0.1
  std::uint64_t seed = 1;

  void validate() const;
};

// Backbone output geometry: a [channels, freq_cells, timesteps] map where one
// timestep covers frames_per_step input frames.
struct MapGeometry {
  int channels = 0;
  int freq_cells = 0;
  int timesteps = 0;
  int frames_per_step = 0;
};

inline MapGeometry feature_map_geometry(const ModelConfig& cfg) {
  const std::size_t blocks = cfg.channels.size();
  if (blocks == 0) throw ConfigError("model: backbone needs at least one block");
  if (cfg.stride_freq.size() != blocks || cfg.stride_time.size() != blocks ||
      cfg.pad_freq.size() != blocks || cfg.pad_time.size() != blocks) {
    throw ConfigError("model: backbone vectors differ in length");
  }
  int f = cfg.freq_bins, t = cfg.chunk_frames, fps = 1;
  for (std::size_t i = 0; i < blocks; ++i) {
    if (cfg.channels[i] < 1) throw ConfigError("model: channels must be >= 1");
    if (cfg.stride_freq[i] < 1 || cfg.stride_time[i] < 1)
      throw ConfigError("model: strides must be >= 1");
    if (cfg.pad_freq[i] < 0 || cfg.pad_time[i] < 0)
      throw ConfigError("model: negative padding");
    if (f + 2 * cfg.pad_freq[i] < 3 || t + 2 * cfg.pad_time[i] < 3)
      throw ConfigError("model: 3x3 kernel does not fit block " + std::to_string(i) +
                        " input");
    f = (f + 2 * cfg.pad_freq[i] - 3) / cfg.stride_freq[i] + 1;
    t = (t + 2 * cfg.pad_time[i] - 3) / cfg.stride_time[i] + 1;
    fps *= cfg.stride_time[i];
    if (f < 1 || t < 1) throw ConfigError("model: backbone collapses the input");
  }
  return MapGeometry{cfg.channels.back(), f, t, fps};
}

inline void ModelConfig::validate() const {
  if (freq_bins < 1) throw ConfigError("model: freq_bins must be >= 1");
  if (chunk_frames < 1) throw ConfigError("model: chunk_frames must be >= 1");
  if (!(frame_shift_s > 0)) throw ConfigError("model: frame_shift_s must be > 0");
  feature_map_geometry(*this);  // validates the backbone vectors
  if (rpn_channels < 1) throw ConfigError("model: rpn_channels must be >= 1");
  if (anchor_sizes.empty()) throw ConfigError("model: anchor_sizes must be nonempty");
  for (int s : anchor_sizes) {
    if (s < 1) throw ConfigError("model: anchor_sizes must be positive");
  }
  if (pre_nms_top_n < 1) throw ConfigError("model: pre_nms_top_n must be >= 1");
  if (!(rpn_nms_threshold >= 0.0 && rpn_nms_threshold < 1.0))
    throw ConfigError("model: rpn_nms_threshold must lie in [0,1)");
  if (train_proposals < 1 || eval_proposals < 1)
    throw ConfigError("model: proposal keep counts must be >= 1");
  if (roi_bins < 1) throw ConfigError("model: roi_bins must be >= 1");
  if (fc_dim < 1) throw ConfigError("model: fc_dim must be >= 1");
  if (embedding_dim < 1) throw ConfigError("model: embedding_dim must be >= 1");
  if (num_speakers < 0) throw ConfigError("model: num_speakers must be >= 0");
  if (!(fg_iou > bg_iou) || !(fg_iou < 1.0) || !(bg_iou > 0.0))
    throw ConfigError("model: need 0 < bg_iou < fg_iou < 1");
  if (rpn_batch < 1 || roi_batch < 1)
    throw ConfigError("model: sample batch sizes must be >= 1");
  if (rpn_fg_fraction < 0.0 || rpn_fg_fraction > 1.0 || roi_fg_fraction < 0.0 ||
      roi_fg_fraction > 1.0)
    throw ConfigError("model: fg fractions must lie in [0,1]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ConfigError("model: alpha must be finite and >= 0");
  if (!(learning_rate > 0)) throw ConfigError("model: learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("model: momentum must lie in [0,1)");
}

namespace detail {

inline std::string join_list(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string join_list(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<long long> split_list(const std::string& s, const std::string& key) {
  std::vector<long long> out;
  if (s.empty() || s == "none") return out;
  std::size_t pos = 0;
  while (true) {
    std::size_t comma = s.find(',', pos);
    std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos
                                                               : comma - pos);
    try {
      std::size_t used = 0;
      long long v = std::stoll(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': bad integer list entry '" + tok + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline std::vector<int> split_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  for (long long v : split_list(s, key)) out.push_back(static_cast<int>(v));
  return out;
}

inline std::vector<std::size_t> split_size_list(const std::string& s,
                                                const std::string& key) {
  std::vector<std::size_t> out;
  for (long long v : split_list(s, key)) {
    if (v < 0) throw ConfigError("config key '" + key + "': negative entry");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

inline ConfigMap to_config_map(const ModelConfig& c) {
  ConfigMap m;
  m.set("model.freq_bins", c.freq_bins);
  m.set("model.chunk_frames", c.chunk_frames);
  m.set("model.frame_shift_s", c.frame_shift_s);
  m.set("model.channels", detail::join_list(c.channels));
  m.set("model.stride_freq", detail::join_list(c.stride_freq));
  m.set("model.stride_time", detail::join_list(c.stride_time));
  m.set("model.pad_freq", detail::join_list(c.pad_freq));
  m.set("model.pad_time", detail::join_list(c.pad_time));
  m.set("model.rpn_channels", c.rpn_channels);
  m.set("model.anchor_sizes", detail::join_list(c.anchor_sizes));
  m.set("model.pre_nms_top_n", c.pre_nms_top_n);
  m.set("model.rpn_nms_threshold", c.rpn_nms_threshold);
  m.set("model.train_proposals", c.train_proposals);
  m.set("model.eval_proposals", c.eval_proposals);
  m.set("model.roi_bins", c.roi_bins);
  m.set("model.fc_dim", c.fc_dim);
  m.set("model.embedding_dim", c.embedding_dim);
  m.set("model.num_speakers", c.num_speakers);
  m.set("model.fg_iou", c.fg_iou);
  m.set("model.bg_iou", c.bg_iou);
  m.set("model.rpn_batch", c.rpn_batch);
  m.set("model.roi_batch", c.roi_batch);
  m.set("model.rpn_fg_fraction", c.rpn_fg_fraction);
  m.set("model.roi_fg_fraction", c.roi_fg_fraction);
  m.set("model.alpha", c.alpha);
  m.set("model.learning_rate", c.learning_rate);
  m.set("model.momentum", c.momentum);
  m.set("model.lr_decay_steps", detail::join_list(c.lr_decay_steps));
  m.set("model.seed", static_cast<std::size_t>(c.seed));
  return m;
}

// Builds a config from `m`, keeping defaults for absent keys.
inline ModelConfig model_config_from_map(const ConfigMap& m) {
  ModelConfig c;
  c.freq_bins = static_cast<int>(m.get_int("model.freq_bins", c.freq_bins));
  c.chunk_frames = static_cast<int>(m.get_int("model.chunk_frames", c.chunk_frames));
  c.frame_shift_s = m.get_double("model.frame_shift_s", c.frame_shift_s);
  if (m.has("model.channels"))
    c.channels = detail::split_int_list(m.get_string("model.channels"), "model.channels");
  if (m.has("model.stride_freq"))
    c.stride_freq =
        detail::split_int_list(m.get_string("model.stride_freq"), "model.stride_freq");
  if (m.has("model.stride_time"))
    c.stride_time =
        detail::split_int_list(m.get_string("model.stride_time"), "model.stride_time");
  if (m.has("model.pad_freq"))
    c.pad_freq = detail::split_int_list(m.get_string("model.pad_freq"), "model.pad_freq");
  if (m.has("model.pad_time"))
    c.pad_time = detail::split_int_list(m.get_string("model.pad_time"), "model.pad_time");
  c.rpn_channels = static_cast<int>(m.get_int("model.rpn_channels", c.rpn_channels));
  if (m.has("model.anchor_sizes"))
    c.anchor_sizes =
        detail::split_int_list(m.get_string("model.anchor_sizes"), "model.anchor_sizes");
  c.pre_nms_top_n = static_cast<std::size_t>(
      m.get_int("model.pre_nms_top_n", static_cast<std::int64_t>(c.pre_nms_top_n)));
  c.rpn_nms_threshold = m.get_double("model.rpn_nms_threshold", c.rpn_nms_threshold);
  c.train_proposals = static_cast<std::size_t>(
      m.get_int("model.train_proposals", static_cast<std::int64_t>(c.train_proposals)));
  c.eval_proposals = static_cast<std::size_t>(
      m.get_int("model.eval_proposals", static_cast<std::int64_t>(c.eval_proposals)));
  c.roi_bins = static_cast<int>(m.get_int("model.roi_bins", c.roi_bins));
  c.fc_dim = static_cast<int>(m.get_int("model.fc_dim", c.fc_dim));
  c.embedding_dim = static_cast<int>(m.get_int("model.embedding_dim", c.embedding_dim));
  c.num_speakers = static_cast<int>(m.get_int("model.num_speakers", c.num_speakers));
  c.fg_iou = m.get_double("model.fg_iou", c.fg_iou);
  c.bg_iou = m.get_double("model.bg_iou", c.bg_iou);
  c.rpn_batch = static_cast<std::size_t>(
      m.get_int("model.rpn_batch", static_cast<std::int64_t>(c.rpn_batch)));
  c.roi_batch = static_cast<std::size_t>(
      m.get_int("model.roi_batch", static_cast<std::int64_t>(c.roi_batch)));
  c.rpn_fg_fraction = m.get_double("model.rpn_fg_fraction", c.rpn_fg_fraction);
  c.roi_fg_fraction = m.get_double("model.roi_fg_fraction", c.roi_fg_fraction);
  c.alpha = m.get_double("model.alpha", c.alpha);
  c.learning_rate = m.get_double("model.learning_rate", c.learning_rate);
  c.momentum = m.get_double("model.momentum", c.momentum);
  if (m.has("model.lr_decay_steps"))
    c.lr_decay_steps = detail::split_size_list(m.get_string("model.lr_decay_steps"),
                                               "model.lr_decay_steps");
  c.seed = static_cast<std::uint64_t>(m.get_int("model.seed", 1));
  return c;
}

// Final per-chunk output: refined intervals (chunk-local frames), fg
// probabilities as scores, one embedding row per interval.
struct ChunkPrediction {
  ProposalSet proposals;
};

// One training example: a feature chunk and its ground truth restricted to
// the chunk window, in chunk-local frame units.
struct TrainExample {
  FeatureChunk chunk;
  Annotation truth;
};

// Pairs `chunk` with `reference_seconds` cropped to the chunk window and
// rescaled to chunk-local frames.
inline Annotation annotation_in_frames(const Annotation& a, double frame_shift_s) {
  if (!(frame_shift_s > 0))
    throw ConfigError("annotation_in_frames: frame_shift_s must be > 0");
  Annotation out;
  out.recording_id = a.recording_id;
  for (const Turn& t : a.turns) {
    out.turns.push_back(
        Turn{t.speaker, Interval(t.span.start / frame_shift_s, t.span.end / frame_shift_s)});
  }
  return out;
}

inline TrainExample example_for_chunk(const FeatureChunk& chunk,
                                      const Annotation& reference_seconds) {
  Annotation frames = annotation_in_frames(reference_seconds, chunk.frame_shift_s);
  double origin = static_cast<double>(chunk.origin_frames);
  Interval window(origin, origin + static_cast<double>(chunk.frames()));
  return TrainExample{chunk, crop(frames, window)};
}

class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    geo_ = feature_map_geometry(cfg_);
    grid_ = build_anchor_grid(geo_.timesteps, cfg_.anchor_sizes, geo_.frames_per_step);
    Rng init(mix64(cfg_.seed, kInitTag));
    int cin = 1;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      const int cout = cfg_.channels[i];
      std::string base = "backbone." + std::to_string(i);
      add_param(base + ".w",
                {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), 3, 3},
                he_scale(cin * 9), init);
      add_param(base + ".b", {static_cast<std::size_t>(cout)}, 0.0, init);
      cin = cout;
    }
    const std::size_t C = static_cast<std::size_t>(geo_.channels);
    const std::size_t F = static_cast<std::size_t>(geo_.freq_cells);
    const std::size_t A = cfg_.anchor_sizes.size();
    const std::size_t R = static_cast<std::size_t>(cfg_.rpn_channels);
    add_param("rpn.conv.w", {R, C, F, 3}, he_scale(static_cast<double>(C * F * 3)), init);
    add_param("rpn.conv.b", {R}, 0.0, init);
    add_param("rpn.cls.w", {A, R, 1, 1}, kHeadScale, init);
    add_param("rpn.cls.b", {A}, 0.0, init);
    add_param("rpn.reg.w", {2 * A, R, 1, 1}, kHeadScale, init);
    add_param("rpn.reg.b", {2 * A}, 0.0, init);
    const std::size_t D =
        C * static_cast<std::size_t>(cfg_.roi_bins) * static_cast<std::size_t>(cfg_.roi_bins);
    const std::size_t H = static_cast<std::size_t>(cfg_.fc_dim);
    const std::size_t E = static_cast<std::size_t>(cfg_.embedding_dim);
    add_param("head.fc1.w", {H, D}, he_scale(static_cast<double>(D)), init);
    add_param("head.fc1.b", {H}, 0.0, init);
    add_param("head.fg.w", {1, H}, kHeadScale, init);
    add_param("head.fg.b", {1}, 0.0, init);
    add_param("head.delta.w", {2, H}, kHeadScale, init);
    add_param("head.delta.b", {2}, 0.0, init);
    add_param("head.emb.w", {E, H}, he_scale(static_cast<double>(H)), init);
    add_param("head.emb.b", {E}, 0.0, init);
    if (cfg_.num_speakers > 0) {
      const std::size_t K = static_cast<std::size_t>(cfg_.num_speakers);
      add_param("head.spk.w", {K, E}, kHeadScale, init);
      add_param("head.spk.b", {K}, 0.0, init);
    }
  }

  // Tensors are shared handles, so a copy would alias every parameter.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  const MapGeometry& geometry() const { return geo_; }
  const AnchorGrid& anchor_grid() const { return grid_; }
  std::size_t step() const { return step_; }

  // Base learning rate decayed x0.1 for every decay position <= the current
  // step counter.
  double current_learning_rate() const {
    double lr = cfg_.learning_rate;
    for (std::size_t d : cfg_.lr_decay_steps) {
      if (step_ >= d) lr *= 0.1;
    }
    return lr;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.name);
    return out;
  }

  // Shared handle: mutating values() through it changes the model.
  Tensor parameter(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  // Eval-mode pass: keeps at most eval_proposals, refines each with the
  // second-stage delta, and drops refinements that collapse or leave the
  // chunk. Read-only on parameters, safe to call concurrently.
  ChunkPrediction predict(const FeatureChunk& chunk) const {
    Graph g;
    ForwardState fs = run_forward(g, chunk, cfg_.eval_proposals);
    const Interval box(0.0, static_cast<double>(cfg_.chunk_frames));
    ChunkPrediction out;
    out.proposals.chunk_origin_frames = static_cast<double>(chunk.origin_frames);
    const std::size_t emb = static_cast<std::size_t>(cfg_.embedding_dim);
    for (std::size_t i = 0; i < fs.proposals.size(); ++i) {
      CoordDelta d{fs.deltas[i * 2], clamp_dw(fs.deltas[i * 2 + 1])};
      DecodedInterval dec = decode(d, fs.proposals[i], box);
      if (dec.status != DecodeStatus::kOk) continue;
      out.proposals.intervals.push_back(*dec.interval);
      out.proposals.scores.push_back(fs.fg_probs[i]);
      const double* row = fs.embeddings.values().data() + i * emb;
      out.proposals.embeddings.emplace_back(row, row + emb);
    }
    out.proposals.validate();
    return out;
  }

  // Kept training proposals for one chunk under the current parameters.
  std::vector<Interval> decode_train_proposals(const FeatureChunk& chunk) const {
    Graph g;
    return run_forward(g, chunk, cfg_.train_proposals).proposals;
  }

  // Builds the full loss graph for a batch and returns the averaged
  // breakdown. With gradients requested, parameter grads are zeroed first
  // and then populated by one backward sweep. Sampling is driven entirely
  // by `sample_seed`, so equal seeds give equal minibatches.
  //
  // Proposal coordinates are constants to the loss (decoded outside the
  // graph, as usual for two-stage detectors). `pinned_proposals` makes that
  // boundary explicit: when given (one list per example), the kept lists are
  // used as-is instead of being re-decoded, so finite differences and the
  // backward sweep differentiate the same function.
  LossBreakdown compute_loss(const std::vector<TrainExample>& batch,
                             const std::map<std::string, int>& speaker_ids,
                             std::uint64_t sample_seed, bool with_gradients,
                             const std::vector<std::vector<Interval>>* pinned_proposals =
                                 nullptr) {
    if (batch.empty()) throw DimensionError("compute_loss: empty batch");
    if (cfg_.num_speakers < 1)
      throw ConfigError("compute_loss: model has no speaker head (num_speakers == 0)");
    if (speaker_ids.empty())
      throw ConfigError("compute_loss: speaker id map must be nonempty");
    for (const auto& [label, id] : speaker_ids) {
      if (id < 0 || id >= cfg_.num_speakers)
        throw ConfigError("compute_loss: speaker id " + std::to_string(id) + " for '" +
                          label + "' outside [0," + std::to_string(cfg_.num_speakers) + ")");
    }
    if (pinned_proposals && pinned_proposals->size() != batch.size())
      throw DimensionError("compute_loss: pinned proposal lists and batch differ");
    Graph g;
    Rng rng(sample_seed);
    LossBreakdown acc;
    acc.alpha = cfg_.alpha;
    Tensor total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::vector<Interval>* pinned =
          pinned_proposals ? &(*pinned_proposals)[i] : nullptr;
      Tensor ex_total = example_loss(g, batch[i], speaker_ids, rng, acc, pinned);
      total = total.defined() ? g.add(total, ex_total) : ex_total;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    acc.rpn_cls *= inv;
    acc.rpn_reg *= inv;
    acc.rcnn_cls *= inv;
    acc.rcnn_reg *= inv;
    acc.spk_cls *= inv;
    if (with_gradients) {
      for (auto& p : params_) p.tensor.zero_grad();
      g.backward(g.scale(total, inv));
    }
    return acc;
  }

  // One momentum-SGD update on one batch. Deterministic given (parameters,
  // batch, seed, step counter); batch elements accumulate in order.
  LossBreakdown train_step(const std::vector<TrainExample>& batch,
                           const std::map<std::string, int>& speaker_ids) {
    LossBreakdown parts =
        compute_loss(batch, speaker_ids, mix64(cfg_.seed, kSampleTag, step_), true);
    const double lr = current_learning_rate();
    for (auto& p : params_) {
      auto& val = p.tensor.values();
      const auto& grad = p.tensor.node()->grad;
      const bool has_grad = grad.size() == val.size();
      for (std::size_t i = 0; i < val.size(); ++i) {
        p.velocity[i] = cfg_.momentum * p.velocity[i] + (has_grad ? grad[i] : 0.0);
        val[i] -= lr * p.velocity[i];
      }
      p.tensor.check_finite_values("train_step: parameter '" + p.name + "'");
    }
    ++step_;
    return parts;
  }

  // Switches to adaptation hyper-parameters and re-initializes the speaker
  // head for a new inventory. Everything upstream of the speaker softmax is
  // untouched, so non-speaker outputs stay bit-identical.
  void configure_for_adaptation(int num_speakers, double learning_rate = 4e-5,
                                double alpha = 0.1) {
    if (num_speakers < 1)
      throw ConfigError("configure_for_adaptation: num_speakers must be >= 1");
    if (!(learning_rate > 0))
      throw ConfigError("configure_for_adaptation: learning_rate must be > 0");
    cfg_.num_speakers = num_speakers;
    cfg_.learning_rate = learning_rate;
    cfg_.alpha = alpha;
    cfg_.lr_decay_steps.clear();
    step_ = 0;
    remove_param("head.spk.w");
    remove_param("head.spk.b");
    Rng r(mix64(cfg_.seed, kAdaptTag, static_cast<std::uint64_t>(num_speakers)));
    const std::size_t K = static_cast<std::size_t>(num_speakers);
    const std::size_t E = static_cast<std::size_t>(cfg_.embedding_dim);
    add_param("head.spk.w", {K, E}, kHeadScale, r);
    add_param("head.spk.b", {K}, 0.0, r);
  }

  void save_checkpoint(const std::string& path) const {
    namespace fs = std::filesystem;
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
      std::string buf;
      buf.append(kCkptMagic, 8);
      append_u32(buf, kCkptVersion);
      append_u64(buf, step_);
      const std::string cfg_text = to_config_map(cfg_).serialize();
      append_u64(buf, cfg_text.size());
      buf += cfg_text;
      append_u64(buf, params_.size());
      for (const auto& p : params_) {
        append_u64(buf, p.name.size());
        buf += p.name;
        const auto& shape = p.tensor.shape();
        append_u32(buf, static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) append_u64(buf, d);
        for (double v : p.tensor.values()) append_f64(buf, v);
        for (double v : p.velocity) append_f64(buf, v);
      }
      buf.append(kCkptEnd, 8);
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      out.close();
      if (!out) throw IoError("failed writing checkpoint '" + tmp + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }

  // Restores parameters, optimizer state, and the step counter into this
  // model. The file's structural geometry must match; training
  // hyper-parameters of this model are kept as-is.
  void load_parameters(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
      throw IoError("'" + path + "' is not a model checkpoint (bad magic)");
    const std::uint32_t version = read_u32(in, path);
    if (version != kCkptVersion)
      throw IoError("checkpoint '" + path + "' has unsupported version " +
                    std::to_string(version));
    const std::uint64_t file_step = read_u64(in, path);
    const std::uint64_t cfg_len = read_u64(in, path);
    if (cfg_len > (1u << 20)) throw IoError("checkpoint '" + path + "' config oversized");
    std::string cfg_text(cfg_len, '\0');
    if (!in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len)))
      throw IoError("truncated checkpoint '" + path + "'");
    const ModelConfig file_cfg =
        model_config_from_map(ConfigMap::parse(cfg_text, path + ":config"));
    require_same_geometry(file_cfg, path);
    const std::uint64_t nparams = read_u64(in, path);
    if (nparams != params_.size())
      throw ConfigError("checkpoint '" + path + "' holds " + std::to_string(nparams) +
                        " parameters, model expects " + std::to_string(params_.size()));
    for (std::uint64_t i = 0; i < nparams; ++i) {
      const std::uint64_t name_len = read_u64(in, path);
      if (name_len > 4096) throw IoError("checkpoint '" + path + "' name oversized");
      std::string name(name_len, '\0');
      if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
        throw IoError("truncated checkpoint '" + path + "'");
      auto it = by_name_.find(name);
      if (it == by_name_.end())
        throw ConfigError("checkpoint '" + path + "' has unknown parameter '" + name + "'");
      ParamEntry& p = params_[it->second];
      const std::uint32_t rank = read_u32(in, path);
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(read_u64(in, path));
      if (shape != p.tensor.shape())
        throw ConfigError("checkpoint '" + path + "' parameter '" + name +
                          "' shape mismatch");
      for (auto& v : p.tensor.values()) v = read_f64(in, path);
      for (auto& v : p.velocity) v = read_f64(in, path);
    }
    char end[8];
    if (!in.read(end, 8) || std::memcmp(end, kCkptEnd, 8) != 0)
      throw IoError("truncated checkpoint '" + path + "'");
    step_ = file_step;
  }

  // Reconstructs a model from the config embedded in the checkpoint.
  static Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
      throw IoError("'" + path + "' is not a model checkpoint (bad magic)");
    const std::uint32_t version = read_u32(in, path);
    if (version != kCkptVersion)
      throw IoError("checkpoint '" + path + "' has unsupported version " +
                    std::to_string(version));
    read_u64(in, path);  // step, restored by load_parameters
    const std::uint64_t cfg_len = read_u64(in, path);
    if (cfg_len > (1u << 20)) throw IoError("checkpoint '" + path + "' config oversized");
    std::string cfg_text(cfg_len, '\0');
    if (!in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len)))
      throw IoError("truncated checkpoint '" + path + "'");
    in.close();
    Model m(model_config_from_map(ConfigMap::parse(cfg_text, path + ":config")));
    m.load_parameters(path);
    return m;
  }

 private:
  static constexpr std::uint64_t kInitTag = 0x1217;
  static constexpr std::uint64_t kSampleTag = 0x5a3e;
  static constexpr std::uint64_t kAdaptTag = 0xada9;
  static constexpr double kHeadScale = 0.01;
  static constexpr char kCkptMagic[9] = "RPDCKPT1";
  static constexpr char kCkptEnd[9] = "RPDCKEND";
  static constexpr std::uint32_t kCkptVersion = 1;

  struct ParamEntry {
    std::string name;
    Tensor tensor;
    std::vector<double> velocity;
  };

  struct ForwardState {
    std::vector<Interval> proposals;  // kept, chunk-local frame units
    std::vector<double> proposal_scores;
    Tensor rpn_cls;     // [A, 1, T] probabilities
    Tensor rpn_reg;     // [2A, 1, T]
    Tensor fg_probs;    // [n]; undefined when no proposal survives
    Tensor deltas;      // [n, 2]
    Tensor embeddings;  // [n, embedding_dim]
    Tensor spk_probs;   // [n, K]; undefined without a speaker head
  };

  static double he_scale(double fan_in) { return std::sqrt(2.0 / fan_in); }

  // Standard detection-regression clamp: caps length growth at x1000 so
  // exp(dw) cannot overflow.
  static double clamp_dw(double dw) {
    const double lim = 6.907755278982137;  // log(1000)
    return std::clamp(dw, -lim, lim);
  }

  void add_param(const std::string& name, std::vector<std::size_t> shape, double scale,
                 Rng& rng) {
    ParamEntry p;
    p.name = name;
    p.tensor = scale == 0.0 ? Tensor::zeros(shape, true)
                            : Tensor::randn(shape, rng, scale, true);
    p.velocity.assign(p.tensor.size(), 0.0);
    by_name_[name] = params_.size();
    params_.push_back(std::move(p));
  }

  void remove_param(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return;
    params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(it->second));
    by_name_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) by_name_[params_[i].name] = i;
  }

  const Tensor& pt(const char* name) const { return params_[by_name_.at(name)].tensor; }

  ForwardState run_forward(Graph& g, const FeatureChunk& chunk, std::size_t keep,
                           const std::vector<Interval>* pinned = nullptr) const {
    if (chunk.freq_bins() != static_cast<std::size_t>(cfg_.freq_bins) ||
        chunk.frames() != static_cast<std::size_t>(cfg_.chunk_frames)) {
      throw DimensionError(
          "forward: chunk is (" + std::to_string(chunk.freq_bins()) + "," +
          std::to_string(chunk.frames()) + ") but the model expects (" +
          std::to_string(cfg_.freq_bins) + "," + std::to_string(cfg_.chunk_frames) + ")");
    }
    chunk.matrix.check_finite_values("forward: input chunk");
    Tensor x = g.reshape(chunk.matrix, {1, chunk.freq_bins(), chunk.frames()});
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      const std::string base = "backbone." + std::to_string(i);
      x = g.relu(g.conv2d(x, pt((base + ".w").c_str()), pt((base + ".b").c_str()),
                          cfg_.stride_freq[i], cfg_.stride_time[i], cfg_.pad_freq[i],
                          cfg_.pad_time[i]));
    }
    const Tensor fmap = x;  // [C, F, T]
    Tensor rh = g.relu(g.conv2d(fmap, pt("rpn.conv.w"), pt("rpn.conv.b"), 1, 1, 0, 1));
    ForwardState fs;
    fs.rpn_cls = g.sigmoid(g.conv2d(rh, pt("rpn.cls.w"), pt("rpn.cls.b"), 1, 1, 0, 0));
    fs.rpn_reg = g.conv2d(rh, pt("rpn.reg.w"), pt("rpn.reg.b"), 1, 1, 0, 0);

    if (pinned) {
      fs.proposals = *pinned;
    } else {
      const std::size_t A = cfg_.anchor_sizes.size();
      const std::size_t T = static_cast<std::size_t>(geo_.timesteps);
      const Interval box(0.0, static_cast<double>(cfg_.chunk_frames));
      ProposalSet cand;
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        const std::size_t c = i / A, s = i % A;
        CoordDelta d{fs.rpn_reg[(2 * s) * T + c],
                     clamp_dw(fs.rpn_reg[(2 * s + 1) * T + c])};
        DecodedInterval dec = decode(d, grid_.anchors[i], box);
        if (dec.status != DecodeStatus::kOk) continue;
        cand.intervals.push_back(*dec.interval);
        cand.scores.push_back(fs.rpn_cls[s * T + c]);
      }
      ProposalSet kept =
          filter_proposals(cand, cfg_.pre_nms_top_n, cfg_.rpn_nms_threshold, keep);
      fs.proposals = kept.intervals;
      fs.proposal_scores = kept.scores;
    }
    const std::size_t n = fs.proposals.size();
    if (n == 0) return fs;

    const RoiAlignConfig rcfg{cfg_.roi_bins, 4};
    const double fps = static_cast<double>(geo_.frames_per_step);
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (const Interval& iv : fs.proposals) {
      rows.push_back(roi_align(g, fmap, Interval(iv.start / fps, iv.end / fps), rcfg));
    }
    Tensor feats = g.stack_rows(rows);  // [n, C * roi_bins^2]
    Tensor h = g.relu(g.linear(feats, pt("head.fc1.w"), pt("head.fc1.b")));
    fs.fg_probs =
        g.reshape(g.sigmoid(g.linear(h, pt("head.fg.w"), pt("head.fg.b"))), {n});
    fs.deltas = g.linear(h, pt("head.delta.w"), pt("head.delta.b"));
    fs.embeddings = g.relu(g.linear(h, pt("head.emb.w"), pt("head.emb.b")));
    if (cfg_.num_speakers > 0) {
      fs.spk_probs = g.softmax(g.linear(fs.embeddings, pt("head.spk.w"), pt("head.spk.b")), 1);
    }
    return fs;
  }

  // Five-term loss of one example; accumulates raw (unaveraged) part values
  // into `acc` and returns the combined scalar node.
  Tensor example_loss(Graph& g, const TrainExample& ex,
                      const std::map<std::string, int>& speaker_ids, Rng& rng,
                      LossBreakdown& acc, const std::vector<Interval>* pinned) {
    ForwardState fs = run_forward(g, ex.chunk, cfg_.train_proposals, pinned);
    const std::size_t A = cfg_.anchor_sizes.size();
    const std::size_t T = static_cast<std::size_t>(geo_.timesteps);
    const Tensor zero = Tensor::scalar_value(0.0);

    // proposal-network terms, sampled on the anchor grid
    Tensor rpn_cls = zero, rpn_reg = zero;
    const TargetAssignment assign =
        assign_targets(grid_, ex.truth, {}, cfg_.fg_iou, cfg_.bg_iou);
    const std::vector<std::size_t> sel =
        sample_minibatch(assign, cfg_.rpn_batch, cfg_.rpn_fg_fraction, rng);
    if (!sel.empty()) {
      std::vector<std::size_t> flats;
      std::vector<int> cls_targets;
      std::vector<std::size_t> reg_flats;
      std::vector<double> reg_targets;
      for (std::size_t i : sel) {
        const std::size_t c = i / A, s = i % A;
        flats.push_back(s * T + c);
        const bool fg = assign.labels[i] == AnchorLabel::kFg;
        cls_targets.push_back(fg ? 1 : 0);
        if (fg) {
          const Interval& truth_span =
              ex.truth.turns[static_cast<std::size_t>(assign.matched_truth[i])].span;
          const CoordDelta d = encode(truth_span, grid_.anchors[i]);
          reg_flats.push_back((2 * s) * T + c);
          reg_flats.push_back((2 * s + 1) * T + c);
          reg_targets.push_back(d.dx);
          reg_targets.push_back(d.dw);
        }
      }
      rpn_cls = bce_loss(g, g.gather(fs.rpn_cls, flats), cls_targets);
      if (!reg_flats.empty()) {
        rpn_reg = smooth_l1_loss(g, g.gather(fs.rpn_reg, reg_flats), reg_targets,
                                 static_cast<double>(sel.size()));
      }
    }

    // second-stage terms, sampled on kept proposals under the same IoU rule
    Tensor rcnn_cls = zero, rcnn_reg = zero, spk_cls = zero;
    if (!fs.proposals.empty()) {
      const TargetAssignment a2 =
          assign_targets(fs.proposals, ex.truth, speaker_ids, cfg_.fg_iou, cfg_.bg_iou);
      const std::vector<std::size_t> sel2 =
          sample_minibatch(a2, cfg_.roi_batch, cfg_.roi_fg_fraction, rng);
      if (!sel2.empty()) {
        std::vector<int> cls_targets;
        std::vector<std::size_t> fg_rows;
        for (std::size_t i : sel2) {
          const bool fg = a2.labels[i] == AnchorLabel::kFg;
          cls_targets.push_back(fg ? 1 : 0);
          if (fg) fg_rows.push_back(i);
        }
        rcnn_cls = bce_loss(g, g.gather(fs.fg_probs, sel2), cls_targets);
        if (!fg_rows.empty()) {
          std::vector<std::size_t> dflats;
          std::vector<double> dtargets;
          std::vector<std::size_t> labels;
          for (std::size_t i : fg_rows) {
            const Interval& truth_span =
                ex.truth.turns[static_cast<std::size_t>(a2.matched_truth[i])].span;
            const CoordDelta d = encode(truth_span, fs.proposals[i]);
            dflats.push_back(i * 2);
            dflats.push_back(i * 2 + 1);
            dtargets.push_back(d.dx);
            dtargets.push_back(d.dw);
            labels.push_back(static_cast<std::size_t>(a2.matched_speaker[i]));
          }
          rcnn_reg = smooth_l1_loss(g, g.gather(fs.deltas, dflats), dtargets,
                                    static_cast<double>(sel2.size()));
          spk_cls = cross_entropy_loss(g, g.gather_rows(fs.spk_probs, fg_rows), labels);
        }
      }
    }

    check_term(rpn_cls, "rpn_cls");
    check_term(rpn_reg, "rpn_reg");
    check_term(rcnn_cls, "rcnn_cls");
    check_term(rcnn_reg, "rcnn_reg");
    check_term(spk_cls, "spk_cls");
    acc.rpn_cls += rpn_cls.scalar();
    acc.rpn_reg += rpn_reg.scalar();
    acc.rcnn_cls += rcnn_cls.scalar();
    acc.rcnn_reg += rcnn_reg.scalar();
    acc.spk_cls += spk_cls.scalar();
    return combine_losses(g, rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, spk_cls, cfg_.alpha);
  }

  static void check_term(const Tensor& t, const char* name) {
    if (!std::isfinite(t.scalar()))
      throw DataError(std::string("train_step: non-finite ") + name + " loss");
  }

  void require_same_geometry(const ModelConfig& other, const std::string& path) const {
    static const char* keys[] = {
        "model.freq_bins",   "model.chunk_frames", "model.channels",
        "model.stride_freq", "model.stride_time",  "model.pad_freq",
        "model.pad_time",    "model.rpn_channels", "model.anchor_sizes",
        "model.roi_bins",    "model.fc_dim",       "model.embedding_dim",
        "model.num_speakers"};
    const ConfigMap mine = to_config_map(cfg_);
    const ConfigMap theirs = to_config_map(other);
    for (const char* k : keys) {
      if (mine.get_string(k) != theirs.get_string(k)) {
        throw ConfigError("checkpoint '" + path + "' geometry mismatch at " + k + ": '" +
                          theirs.get_string(k) + "' vs '" + mine.get_string(k) + "'");
      }
    }
  }

  // ---- little-endian scalar packing ----

  static void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  static void append_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  static void append_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    append_u64(buf, bits);
  }

  static std::uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
      throw IoError("truncated checkpoint '" + path + "'");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  static std::uint64_t read_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
      throw IoError("truncated checkpoint '" + path + "'");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  static double read_f64(std::istream& in, const std::string& path) {
    const std::uint64_t bits = read_u64(in, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  ModelConfig cfg_;
  MapGeometry geo_;
  AnchorGrid grid_;
  std::vector<ParamEntry> params_;
  std::map<std::string, std::size_t> by_name_;
  std::size_t step_ = 0;
};

}  // namespace rpdiar

#endif  // RPDIAR_MODEL_HPP_
