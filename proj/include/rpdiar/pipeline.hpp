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

#ifndef RPDIAR_PIPELINE_HPP_
#define RPDIAR_PIPELINE_HPP_

// Recording-level post-processing: score thresholding, K-means clustering of
// proposal embeddings pooled across all chunks, per-cluster NMS, and assembly
// of the diarization hypothesis. Clusters become speaker labels; residual
// same-cluster overlaps are merged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/proposals.hpp"
#include "rpdiar/rng.hpp"

namespace rpdiar {

struct KmeansParams {
  int restarts = 8;
  int max_iter = 50;
  std::uint64_t seed = 17;
};

struct KmeansResult {
  std::vector<int> labels;                     // one cluster id per input row
  std::vector<std::vector<double>> centroids;  // k rows
  double wcss = 0.0;                           // within-cluster sum of squares
  int k = 0;                                   // clusters actually used
  int iterations = 0;                          // Lloyd iterations of the winner
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline std::size_t count_distinct(std::vector<std::vector<double>> points) {
  std::sort(points.begin(), points.end());
  return static_cast<std::size_t>(
      std::unique(points.begin(), points.end()) - points.begin());
}

}  // namespace detail

// Lloyd's algorithm with seeded farthest-point initialization, best of
// `restarts` by WCSS. Ties in point-to-centroid assignment break toward the
// lower centroid index, making every run a pure function of the seed. If the
// points hold fewer than k distinct values, k is reduced to that count.
inline KmeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                           const KmeansParams& params = {}) {
  const std::size_t n = points.size();
  if (n == 0) throw DataError("kmeans: no points");
  if (k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (static_cast<std::size_t>(k) > n)
    throw DataError("kmeans: k exceeds the number of points");
  if (params.restarts < 1 || params.max_iter < 1)
    throw ConfigError("kmeans: restarts and max_iter must be >= 1");
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) throw DimensionError("kmeans: ragged point dimensions");
  }

  const std::size_t distinct = detail::count_distinct(points);
  if (static_cast<std::size_t>(k) > distinct) k = static_cast<int>(distinct);

  KmeansResult best;
  best.wcss = std::numeric_limits<double>::infinity();
  for (int r = 0; r < params.restarts; ++r) {
    Rng rng(mix64(params.seed, static_cast<std::uint64_t>(r)));

    // Farthest-point init: random first centroid, then repeatedly the point
    // farthest from its nearest chosen centroid (ties toward lower index).
    std::vector<std::vector<double>> centroids;
    centroids.push_back(points[rng.bounded(n)]);
    while (centroids.size() < static_cast<std::size_t>(k)) {
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& c : centroids) d = std::min(d, detail::sq_dist(points[i], c));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids.push_back(points[far]);
    }

    std::vector<int> labels(n, -1);
    int iters = 0;
    for (; iters < params.max_iter; ++iters) {
      bool changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        int arg = 0;
        double bd = detail::sq_dist(points[i], centroids[0]);
        for (int c = 1; c < k; ++c) {
          double d = detail::sq_dist(points[i], centroids[static_cast<std::size_t>(c)]);
          if (d < bd) {
            bd = d;
            arg = c;
          }
        }
        if (labels[i] != arg) {
          labels[i] = arg;
          changed = true;
        }
      }
      if (!changed) break;

      std::vector<std::vector<double>> sums(
          static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
      std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
      for (std::size_t i = 0; i < n; ++i) {
        auto c = static_cast<std::size_t>(labels[i]);
        ++counts[c];
        for (std::size_t j = 0; j < dim; ++j) sums[c][j] += points[i][j];
      }
      for (int c = 0; c < k; ++c) {
        auto cc = static_cast<std::size_t>(c);
        if (counts[cc] == 0) {
          // Re-seed an emptied cluster at the point farthest from its current
          // centroid; deterministic (ties toward lower index).
          std::size_t far = 0;
          double far_d = -1.0;
          for (std::size_t i = 0; i < n; ++i) {
            double d = detail::sq_dist(
                points[i], centroids[static_cast<std::size_t>(labels[i])]);
            if (d > far_d) {
              far_d = d;
              far = i;
            }
          }
          centroids[cc] = points[far];
          continue;
        }
        for (std::size_t j = 0; j < dim; ++j)
          centroids[cc][j] = sums[cc][j] / static_cast<double>(counts[cc]);
      }
    }

    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      wcss += detail::sq_dist(points[i],
                              centroids[static_cast<std::size_t>(labels[i])]);
    if (wcss < best.wcss) {
      best.labels = std::move(labels);
      best.centroids = std::move(centroids);
      best.wcss = wcss;
      best.k = k;
      best.iterations = iters;
    }
  }
  return best;
}

struct SpeakerCountParams {
  int k_max = 8;
  double elbow_factor = 0.35;  // a drop WCSS(k) < factor * WCSS(k-1) is an elbow
  KmeansParams kmeans;
};

// Elbow rule: the smallest k in [2, k_max] where WCSS collapses below
// `elbow_factor` of the previous value, else 1. Splitting merged clouds only
// shrinks WCSS moderately; the collapse happens when k reaches the cloud
// count. A convenience outside the reference evaluation protocol, which uses
// oracle counts.
inline int estimate_num_speakers(const std::vector<std::vector<double>>& points,
                                 const SpeakerCountParams& params = {}) {
  if (points.empty()) throw DataError("estimate_num_speakers: no points");
  if (params.k_max < 1) throw ConfigError("estimate_num_speakers: k_max < 1");
  int cap = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(params.k_max),
                            detail::count_distinct(points)));
  double prev = kmeans(points, 1, params.kmeans).wcss;
  if (prev == 0.0) return 1;
  for (int k = 2; k <= cap; ++k) {
    double cur = kmeans(points, k, params.kmeans).wcss;
    if (cur < params.elbow_factor * prev) return k;
    prev = cur;
  }
  return 1;
}

struct PostprocessConfig {
  double gamma = 0.5;          // drop proposals scoring below this
  double nms_threshold = 0.3;  // per-cluster suppression IoU
  int num_speakers = 0;        // 0 = estimate from the embeddings
  SpeakerCountParams speaker_count;
  KmeansParams kmeans;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0))
      throw ConfigError("PostprocessConfig: gamma outside [0,1]");
    if (!(nms_threshold >= 0.0 && nms_threshold <= 1.0))
      throw ConfigError("PostprocessConfig: nms_threshold outside [0,1]");
    if (num_speakers < 0)
      throw ConfigError("PostprocessConfig: num_speakers < 0");
  }
};

// One labeled segment surviving per-cluster NMS, before same-speaker merging.
struct LabeledSegment {
  int cluster = 0;
  Interval span_s;  // seconds, recording-absolute
  double score = 0.0;
};

struct PostprocessResult {
  Annotation annotation;
  int k_used = 0;
  std::vector<LabeledSegment> segments;  // pre-merge, for stats and inspection
  std::vector<std::string> warnings;
};

// predictions: per-chunk proposal sets with chunk-local intervals in frames
// and `chunk_origin_frames` set. frame_shift_s converts frames to seconds.
inline PostprocessResult postprocess(const std::vector<ProposalSet>& predictions,
                                     double frame_shift_s,
                                     const PostprocessConfig& cfg,
                                     const std::string& recording_id = "") {
  cfg.validate();
  if (!(frame_shift_s > 0.0))
    throw ConfigError("postprocess: frame_shift_s must be positive");

  // Pool survivors of the score threshold across all chunks.
  std::vector<Interval> abs_frames;
  std::vector<double> scores;
  std::vector<std::vector<double>> embeddings;
  for (const ProposalSet& set : predictions) {
    set.validate();
    if (set.embeddings.empty() && set.size() > 0)
      throw DataError("postprocess: proposals lack embeddings");
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set.scores[i] < cfg.gamma) continue;
      abs_frames.push_back(set.intervals[i].shifted(set.chunk_origin_frames));
      scores.push_back(set.scores[i]);
      embeddings.push_back(set.embeddings[i]);
    }
  }

  PostprocessResult out;
  out.annotation.recording_id = recording_id;
  if (abs_frames.empty()) return out;  // empty hypothesis is a valid outcome

  int k = cfg.num_speakers;
  if (k == 0) {
    k = estimate_num_speakers(embeddings, cfg.speaker_count);
  }
  if (static_cast<std::size_t>(k) > abs_frames.size()) {
    out.warnings.push_back("requested " + std::to_string(k) +
                           " speakers but only " +
                           std::to_string(abs_frames.size()) +
                           " proposals survived; k reduced");
    k = static_cast<int>(abs_frames.size());
  }
  KmeansResult clusters = kmeans(embeddings, k, cfg.kmeans);
  if (clusters.k < k) {
    out.warnings.push_back("duplicate embeddings reduced k from " +
                           std::to_string(k) + " to " +
                           std::to_string(clusters.k));
  }
  out.k_used = clusters.k;

  // Per-cluster NMS over recording-absolute intervals, then label by cluster.
  for (int c = 0; c < clusters.k; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < abs_frames.size(); ++i)
      if (clusters.labels[i] == c) members.push_back(i);
    std::vector<Interval> ivs;
    std::vector<double> svs;
    for (std::size_t i : members) {
      ivs.push_back(abs_frames[i]);
      svs.push_back(scores[i]);
    }
    for (std::size_t j : nms(ivs, svs, cfg.nms_threshold)) {
      const Interval& iv = ivs[j];
      out.segments.push_back(LabeledSegment{
          c, Interval(iv.start * frame_shift_s, iv.end * frame_shift_s), svs[j]});
    }
  }
  std::sort(out.segments.begin(), out.segments.end(),
            [](const LabeledSegment& a, const LabeledSegment& b) {
              if (a.span_s.start != b.span_s.start)
                return a.span_s.start < b.span_s.start;
              return a.cluster < b.cluster;
            });

  for (const LabeledSegment& seg : out.segments) {
    out.annotation.turns.push_back(
        Turn{"spk" + std::to_string(seg.cluster), seg.span_s});
  }
  out.annotation = canonicalize(out.annotation);
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_PIPELINE_HPP_
