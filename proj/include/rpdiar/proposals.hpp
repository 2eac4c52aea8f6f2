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

#ifndef RPDIAR_PROPOSALS_HPP_
#define RPDIAR_PROPOSALS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "rpdiar/common.hpp"
#include "rpdiar/interval.hpp"
#include "rpdiar/tensor.hpp"

namespace rpdiar {

// Offset of a segment relative to a reference interval:
//   dx = (center - center_ref) / length_ref
//   dw = log(length / length_ref)
struct CoordDelta {
  double dx = 0.0;
  double dw = 0.0;
};

inline CoordDelta encode(const Interval& segment, const Interval& reference) {
  CoordDelta d;
  d.dx = (segment.center() - reference.center()) / reference.length();
  d.dw = std::log(segment.length() / reference.length());
  return d;
}

// Inverse of encode with no clipping applied.
inline Interval decode_unclipped(const CoordDelta& delta, const Interval& reference) {
  if (!std::isfinite(delta.dx) || !std::isfinite(delta.dw))
    throw DataError("decode: delta is not finite");
  double center = reference.center() + delta.dx * reference.length();
  double length = reference.length() * std::exp(delta.dw);
  return Interval::from_center_length(center, length);
}

enum class DecodeStatus { kOk, kDegenerate, kOutside };

struct DecodedInterval {
  DecodeStatus status = DecodeStatus::kOutside;
  std::optional<Interval> interval;
};

// Decodes and clips to `clip_to`. Results shorter than one frame after
// clipping are flagged kDegenerate; results that miss `clip_to` entirely
// carry no interval.
inline DecodedInterval decode(const CoordDelta& delta, const Interval& reference,
                              const Interval& clip_to) {
  Interval raw = decode_unclipped(delta, reference);
  DecodedInterval out;
  std::optional<Interval> clipped = intersect(raw, clip_to);
  if (!clipped.has_value()) {
    out.status = DecodeStatus::kOutside;
    return out;
  }
  out.interval = clipped;
  out.status = clipped->length() <= 1.0 ? DecodeStatus::kDegenerate : DecodeStatus::kOk;
  return out;
}

// Parallel lists of candidate segments for one chunk. Intervals are in
// frames, chunk-local; `chunk_origin_frames` positions them within the
// recording. `embeddings` is empty or one row per interval.
struct ProposalSet {
  std::vector<Interval> intervals;
  std::vector<double> scores;
  std::vector<std::vector<double>> embeddings;
  double chunk_origin_frames = 0.0;

  std::size_t size() const { return intervals.size(); }

  void validate() const {
    if (scores.size() != intervals.size())
      throw DimensionError("ProposalSet: scores and intervals differ in length");
    if (!embeddings.empty() && embeddings.size() != intervals.size())
      throw DimensionError("ProposalSet: embeddings and intervals differ in length");
    for (double s : scores) {
      if (!(s >= 0.0 && s <= 1.0))
        throw DataError("ProposalSet: score outside [0,1]");
    }
  }

  ProposalSet subset(const std::vector<std::size_t>& keep) const {
    ProposalSet out;
    out.chunk_origin_frames = chunk_origin_frames;
    for (std::size_t i : keep) {
      out.intervals.push_back(intervals.at(i));
      out.scores.push_back(scores.at(i));
      if (!embeddings.empty()) out.embeddings.push_back(embeddings.at(i));
    }
    return out;
  }
};

// Greedy non-maximum suppression. Repeatedly keeps the highest-scoring
// remaining interval and suppresses everything overlapping it with
// IoU > threshold. Score ties break toward the lower original index.
// Returns kept indices in descending-score order.
inline std::vector<std::size_t> nms(const std::vector<Interval>& intervals,
                                    const std::vector<double>& scores,
                                    double iou_threshold) {
  if (intervals.size() != scores.size())
    throw DimensionError("nms: scores and intervals differ in length");
  std::vector<std::size_t> order(intervals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(intervals.size(), false);
  for (std::size_t i : order) {
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t j : order) {
      if (!suppressed[j] && j != i && iou(intervals[i], intervals[j]) > iou_threshold)
        suppressed[j] = true;
    }
  }
  return kept;
}

inline std::vector<std::size_t> nms(const ProposalSet& set, double iou_threshold) {
  return nms(set.intervals, set.scores, iou_threshold);
}

// Rank filter -> NMS -> rank filter. No padding when fewer survive.
inline ProposalSet filter_proposals(const ProposalSet& set, std::size_t pre_nms_top_n,
                                    double nms_threshold, std::size_t post_nms_top_n) {
  set.validate();
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return set.scores[a] > set.scores[b];
  });
  if (order.size() > pre_nms_top_n) order.resize(pre_nms_top_n);
  ProposalSet pre = set.subset(order);
  std::vector<std::size_t> kept = nms(pre, nms_threshold);
  if (kept.size() > post_nms_top_n) kept.resize(post_nms_top_n);
  return pre.subset(kept);
}

struct RoiAlignConfig {
  int bins_per_axis = 7;
  int samples_per_bin = 4;
};

// Pools a full-height time region of a [C, F, T] map into [C, N, N].
// `roi` is on the feature-map time axis. Each of the N x N bins is read at
// its four quarter points; each point is bilinearly interpolated between
// cell centers (at integer + 0.5 coordinates) with edge clamping, and the
// four reads are averaged. Gradients flow to the touched cells.
inline Tensor roi_align(Graph& g, const Tensor& feature_map, const Interval& roi,
                        const RoiAlignConfig& cfg = {}) {
  const auto& shape = feature_map.shape();
  if (shape.size() != 3) throw DimensionError("roi_align: feature map must be [C,F,T]");
  if (cfg.bins_per_axis < 1) throw ConfigError("roi_align: bins_per_axis must be >= 1");
  if (cfg.samples_per_bin != 4)
    throw ConfigError("roi_align: samples_per_bin must be 4 (2x2 grid)");
  if (!(roi.length() > 0.0)) throw DataError("roi_align: zero-length roi");
  const std::size_t C = shape[0], F = shape[1], T = shape[2];
  const int N = cfg.bins_per_axis;

  // Bilinear read at continuous (f, t): contributes to at most 4 cells.
  struct Tap {
    std::size_t cell;  // flat (f, t) offset within one channel
    double weight;
  };
  auto bilinear = [&](double fpos, double tpos, std::vector<Tap>& taps, double scale) {
    auto axis = [](double pos, std::size_t size, std::size_t& lo, std::size_t& hi,
                   double& frac) {
      double u = pos - 0.5;
      double fl = std::floor(u);
      frac = u - fl;
      long i0 = static_cast<long>(fl);
      long i1 = i0 + 1;
      long last = static_cast<long>(size) - 1;
      lo = static_cast<std::size_t>(std::clamp(i0, 0L, last));
      hi = static_cast<std::size_t>(std::clamp(i1, 0L, last));
    };
    std::size_t f0, f1, t0, t1;
    double ff, tf;
    axis(fpos, F, f0, f1, ff);
    axis(tpos, T, t0, t1, tf);
    taps.push_back({f0 * T + t0, scale * (1 - ff) * (1 - tf)});
    taps.push_back({f0 * T + t1, scale * (1 - ff) * tf});
    taps.push_back({f1 * T + t0, scale * ff * (1 - tf)});
    taps.push_back({f1 * T + t1, scale * ff * tf});
  };

  const double bin_f = static_cast<double>(F) / N;
  const double bin_t = roi.length() / N;
  std::vector<std::vector<Tap>> bins(static_cast<std::size_t>(N) * N);
  for (int bf = 0; bf < N; ++bf) {
    for (int bt = 0; bt < N; ++bt) {
      auto& taps = bins[static_cast<std::size_t>(bf) * N + bt];
      for (int sf = 0; sf < 2; ++sf) {
        for (int st = 0; st < 2; ++st) {
          double fpos = (bf + 0.25 + 0.5 * sf) * bin_f;
          double tpos = roi.start + (bt + 0.25 + 0.5 * st) * bin_t;
          bilinear(fpos, tpos, taps, 0.25);
        }
      }
    }
  }

  const double* in = feature_map.values().data();
  std::vector<double> value(C * bins.size(), 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = in + c * F * T;
    for (std::size_t b = 0; b < bins.size(); ++b) {
      double acc = 0;
      for (const Tap& tap : bins[b]) acc += tap.weight * plane[tap.cell];
      value[c * bins.size() + b] = acc;
    }
  }

  std::size_t NN = bins.size();
  return g.make_op({C, static_cast<std::size_t>(N), static_cast<std::size_t>(N)},
                   std::move(value), {feature_map},
                   [bins = std::move(bins), C, F, T, NN](detail::TensorNode& n) {
                     double* gin = n.parents[0]->grad.data();
                     for (std::size_t c = 0; c < C; ++c) {
                       double* plane = gin + c * F * T;
                       for (std::size_t b = 0; b < NN; ++b) {
                         double go = n.grad[c * NN + b];
                         if (go == 0.0) continue;
                         for (const Tap& tap : bins[b])
                           plane[tap.cell] += tap.weight * go;
                       }
                     }
                   });
}

}  // namespace rpdiar

#endif  // RPDIAR_PROPOSALS_HPP_
