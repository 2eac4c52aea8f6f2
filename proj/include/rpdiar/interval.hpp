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

#ifndef RPDIAR_INTERVAL_HPP_
#define RPDIAR_INTERVAL_HPP_

#include <algorithm>
#include <cmath>
#include <optional>

#include "rpdiar/common.hpp"

namespace rpdiar {

// Half-open span [start, end). The unit (frames or seconds) is set by context.
// Anchors may have negative starts; annotation turns never do.
struct Interval {
  double start = 0.0;
  double end = 0.0;

  Interval() = default;
  Interval(double s, double e) : start(s), end(e) {
    if (!(std::isfinite(s) && std::isfinite(e)) || !(e > s)) {
      throw DataError("invalid interval [" + std::to_string(s) + ", " +
                      std::to_string(e) + ")");
    }
  }

  static Interval from_center_length(double center, double length) {
    return Interval(center - 0.5 * length, center + 0.5 * length);
  }

  double length() const { return end - start; }
  double center() const { return 0.5 * (start + end); }

  bool contains(double t) const { return t >= start && t < end; }

  Interval shifted(double offset) const { return Interval(start + offset, end + offset); }
};

inline double intersection_length(const Interval& a, const Interval& b) {
  return std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
}

inline std::optional<Interval> intersect(const Interval& a, const Interval& b) {
  double lo = std::max(a.start, b.start);
  double hi = std::min(a.end, b.end);
  if (hi > lo) return Interval(lo, hi);
  return std::nullopt;
}

// |a∩b| / |a∪b| in [0, 1].
inline double iou(const Interval& a, const Interval& b) {
  double inter = intersection_length(a, b);
  double uni = a.length() + b.length() - inter;
  return inter / uni;
}

}  // namespace rpdiar

#endif  // RPDIAR_INTERVAL_HPP_
