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

#ifndef RPDIAR_ANCHORS_HPP_
#define RPDIAR_ANCHORS_HPP_

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"
#include "rpdiar/interval.hpp"
#include "rpdiar/rng.hpp"

namespace rpdiar {

// Fixed grid of candidate intervals on the frame axis. Ordering is
// timestep-major, then size, so anchor (step c, size index s) sits at
// index c * |sizes| + s. Anchors are not clipped to the chunk.
struct AnchorGrid {
  std::vector<Interval> anchors;
  int timesteps = 0;
  std::vector<int> sizes;
  int frames_per_step = 0;

  std::size_t size() const { return anchors.size(); }
};

inline AnchorGrid build_anchor_grid(int timesteps, const std::vector<int>& sizes,
                                    int frames_per_step) {
  if (timesteps < 1) throw ConfigError("build_anchor_grid: timesteps must be >= 1");
  if (frames_per_step < 1)
    throw ConfigError("build_anchor_grid: frames_per_step must be >= 1");
  if (sizes.empty()) throw ConfigError("build_anchor_grid: sizes must be nonempty");
  for (int s : sizes) {
    if (s < 1) throw ConfigError("build_anchor_grid: sizes must be positive");
  }
  AnchorGrid grid;
  grid.timesteps = timesteps;
  grid.sizes = sizes;
  grid.frames_per_step = frames_per_step;
  grid.anchors.reserve(static_cast<std::size_t>(timesteps) * sizes.size());
  for (int c = 0; c < timesteps; ++c) {
    double center = (c + 0.5) * frames_per_step;
    for (int s : sizes) {
      grid.anchors.push_back(
          Interval::from_center_length(center, static_cast<double>(s) * frames_per_step));
    }
  }
  return grid;
}

enum class AnchorLabel { kFg, kBg, kIgnore };

// Per-anchor training targets. matched_truth / matched_speaker are -1
// unless the anchor is foreground.
struct TargetAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_truth;
  std::vector<int> matched_speaker;
  std::vector<double> max_iou;

  std::size_t count(AnchorLabel want) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), want));
  }
};

// Labels each candidate interval against ground-truth turns, both in frame
// units. The second detection stage reuses this on kept proposals.
//   fg: IoU > fg_threshold with some turn, or best-IoU candidate for a turn.
//   bg: IoU < bg_threshold against every turn.
//   ignore: everything between.
// A foreground candidate is matched to its highest-IoU turn (ties take the
// earlier turn) and carries that turn's speaker id. `speaker_ids` may be
// empty, in which case matched_speaker stays -1 for all candidates.
inline TargetAssignment assign_targets(const std::vector<Interval>& candidates,
                                       const Annotation& truth,
                                       const std::map<std::string, int>& speaker_ids = {},
                                       double fg_threshold = 0.7,
                                       double bg_threshold = 0.3) {
  const std::size_t n = candidates.size();
  const std::size_t m = truth.turns.size();
  TargetAssignment out;
  out.labels.assign(n, AnchorLabel::kBg);
  out.matched_truth.assign(n, -1);
  out.matched_speaker.assign(n, -1);
  out.max_iou.assign(n, 0.0);
  if (m == 0) return out;

  for (const Turn& t : truth.turns) {
    if (!speaker_ids.empty() && speaker_ids.find(t.speaker) == speaker_ids.end()) {
      throw DataError("assign_targets: speaker '" + t.speaker +
                      "' missing from the id map");
    }
  }

  std::vector<double> best_per_truth(m, 0.0);
  std::vector<double> iou_matrix(n * m);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t t = 0; t < m; ++t) {
      double v = iou(candidates[a], truth.turns[t].span);
      iou_matrix[a * m + t] = v;
      if (v > out.max_iou[a]) {
        out.max_iou[a] = v;
        out.matched_truth[a] = static_cast<int>(t);
      }
      best_per_truth[t] = std::max(best_per_truth[t], v);
    }
    if (out.max_iou[a] > fg_threshold) {
      out.labels[a] = AnchorLabel::kFg;
    } else if (out.max_iou[a] < bg_threshold) {
      out.labels[a] = AnchorLabel::kBg;
    } else {
      out.labels[a] = AnchorLabel::kIgnore;
    }
  }

  // Every turn keeps its best-IoU candidate as fg even below the threshold,
  // ties included. Turns that touch no candidate at all force nothing.
  for (std::size_t t = 0; t < m; ++t) {
    if (best_per_truth[t] <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (iou_matrix[a * m + t] == best_per_truth[t]) out.labels[a] = AnchorLabel::kFg;
    }
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (out.labels[a] != AnchorLabel::kFg) {
      out.matched_truth[a] = -1;
      out.matched_speaker[a] = -1;
      continue;
    }
    if (!speaker_ids.empty()) {
      const Turn& t = truth.turns[static_cast<std::size_t>(out.matched_truth[a])];
      out.matched_speaker[a] = speaker_ids.at(t.speaker);
    }
  }
  return out;
}

inline TargetAssignment assign_targets(const AnchorGrid& grid, const Annotation& truth,
                                       const std::map<std::string, int>& speaker_ids = {},
                                       double fg_threshold = 0.7,
                                       double bg_threshold = 0.3) {
  return assign_targets(grid.anchors, truth, speaker_ids, fg_threshold, bg_threshold);
}

// Samples at most `total` non-ignore anchor indices, foreground first.
// Foreground count is capped at floor(fg_fraction * total); the remainder
// is background. Either pool may run short, in which case the other is not
// grown to compensate beyond `total`.
inline std::vector<std::size_t> sample_minibatch(const TargetAssignment& assignment,
                                                 std::size_t total, double fg_fraction,
                                                 Rng& rng) {
  if (fg_fraction < 0.0 || fg_fraction > 1.0)
    throw ConfigError("sample_minibatch: fg_fraction must lie in [0,1]");
  std::vector<std::size_t> fg_pool, bg_pool;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
    if (assignment.labels[i] == AnchorLabel::kFg) fg_pool.push_back(i);
    if (assignment.labels[i] == AnchorLabel::kBg) bg_pool.push_back(i);
  }
  std::size_t want_fg =
      std::min(fg_pool.size(), static_cast<std::size_t>(fg_fraction * total));
  std::vector<std::size_t> out = rng.sample_without_replacement(fg_pool, want_fg);
  std::size_t want_bg = std::min(bg_pool.size(), total - want_fg);
  std::vector<std::size_t> bg = rng.sample_without_replacement(bg_pool, want_bg);
  out.insert(out.end(), bg.begin(), bg.end());
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_ANCHORS_HPP_
