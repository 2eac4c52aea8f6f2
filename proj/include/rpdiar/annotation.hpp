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

#ifndef RPDIAR_ANNOTATION_HPP_
#define RPDIAR_ANNOTATION_HPP_

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rpdiar/interval.hpp"

namespace rpdiar {

// One speaker turn, in seconds.
struct Turn {
  std::string speaker;
  Interval span;
};

// All turns of one recording. Both references and hypotheses use this type.
struct Annotation {
  std::string recording_id;
  std::vector<Turn> turns;

  std::set<std::string> speakers() const {
    std::set<std::string> out;
    for (const auto& t : turns) out.insert(t.speaker);
    return out;
  }

  std::map<std::string, std::vector<Interval>> by_speaker() const {
    std::map<std::string, std::vector<Interval>> out;
    for (const auto& t : turns) out[t.speaker].push_back(t.span);
    return out;
  }

  // Sum of per-turn lengths; counts overlapped time once per turn.
  double total_turn_time() const {
    double s = 0.0;
    for (const auto& t : turns) s += t.span.length();
    return s;
  }

  bool empty() const { return turns.empty(); }
};

// Merges overlapping/adjacent same-speaker turns, sorts by (start, end,
// speaker), drops non-positive turns. Idempotent.
inline Annotation canonicalize(const Annotation& a) {
  constexpr double kAdjEps = 1e-9;
  Annotation out;
  out.recording_id = a.recording_id;
  for (auto& [speaker, spans] : a.by_speaker()) {
    std::vector<Interval> sorted = spans;
    std::sort(sorted.begin(), sorted.end(),
              [](const Interval& x, const Interval& y) {
                return x.start < y.start || (x.start == y.start && x.end < y.end);
              });
    for (const Interval& iv : sorted) {
      if (!(iv.length() > 0.0)) continue;
      if (!out.turns.empty() && out.turns.back().speaker == speaker &&
          iv.start <= out.turns.back().span.end + kAdjEps) {
        auto& last = out.turns.back().span;
        last = Interval(last.start, std::max(last.end, iv.end));
      } else {
        out.turns.push_back(Turn{speaker, iv});
      }
    }
  }
  std::sort(out.turns.begin(), out.turns.end(), [](const Turn& x, const Turn& y) {
    if (x.span.start != y.span.start) return x.span.start < y.span.start;
    if (x.span.end != y.span.end) return x.span.end < y.span.end;
    return x.speaker < y.speaker;
  });
  return out;
}

// Restriction of `a` to `window` (seconds), re-based so the window start
// becomes time zero. Used to pair chunked features with their ground truth.
inline Annotation crop(const Annotation& a, const Interval& window) {
  Annotation out;
  out.recording_id = a.recording_id;
  for (const auto& t : a.turns) {
    if (auto iv = intersect(t.span, window)) {
      out.turns.push_back(Turn{t.speaker, iv->shifted(-window.start)});
    }
  }
  return canonicalize(out);
}

}  // namespace rpdiar

#endif  // RPDIAR_ANNOTATION_HPP_
