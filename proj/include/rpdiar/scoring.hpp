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

#ifndef RPDIAR_SCORING_HPP_
#define RPDIAR_SCORING_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"

namespace rpdiar {

struct ScoringConfig {
  double collar_s = 0.0;        // excluded band around each reference boundary
  bool score_overlap = true;    // false: frames with >= 2 reference speakers skipped
  double frame_step_s = 0.001;  // scoring resolution

  void validate() const {
    if (collar_s < 0) throw ConfigError("ScoringConfig: collar must be >= 0");
    if (!(frame_step_s > 0)) throw ConfigError("ScoringConfig: frame_step must be > 0");
  }
};

// All error fields are ratios. miss/false_alarm/confusion (and der, their
// sum) are fractions of scored reference speaker-time: a frame with k
// reference speakers contributes k * frame_step to the denominator. The
// SAD fields are fractions of scored reference speech time, where each
// speech frame counts once regardless of speaker count.
struct DerReport {
  double der = 0.0;
  double miss = 0.0;
  double false_alarm = 0.0;
  double confusion = 0.0;
  double sad_miss = 0.0;
  double sad_false_alarm = 0.0;
  double scored_time = 0.0;         // reference speaker-time, seconds
  double scored_speech_time = 0.0;  // reference speech time, seconds
};

struct OverlapStats {
  double t_spk_ge1 = 0.0;
  double t_spk_ge2 = 0.0;
  double overlap_ratio = 0.0;
};

// Maximum-weight one-to-one partial assignment on a rows x cols weight
// matrix, exact via subset dynamic programming over the smaller side.
// Returns (row, col) pairs; zero-weight pairs are left unmatched.
inline std::vector<std::pair<std::size_t, std::size_t>> optimal_assignment(
    const std::vector<std::vector<double>>& weights) {
  const std::size_t rows = weights.size();
  const std::size_t cols = rows ? weights[0].size() : 0;
  if (rows == 0 || cols == 0) return {};
  for (const auto& r : weights) {
    if (r.size() != cols) throw DimensionError("optimal_assignment: ragged matrix");
  }
  const bool transposed = rows > cols;
  const std::size_t m = transposed ? cols : rows;  // small side, bitmask indexed
  const std::size_t n = transposed ? rows : cols;
  if (m > 16)
    throw DataError("optimal_assignment: more than 16 speakers on the smaller side");
  auto weight = [&](std::size_t s, std::size_t l) {
    return transposed ? weights[l][s] : weights[s][l];
  };

  const std::size_t masks = std::size_t{1} << m;
  std::vector<double> dp(masks, 0.0);
  // choice[j * masks + mask]: small index assigned to large j, or m for none
  std::vector<std::uint8_t> choice(n * masks, static_cast<std::uint8_t>(m));
  std::vector<double> next(masks);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t mask = 0; mask < masks; ++mask) {
      double best = dp[mask];
      std::uint8_t pick = static_cast<std::uint8_t>(m);
      for (std::size_t s = 0; s < m; ++s) {
        if (!(mask & (std::size_t{1} << s))) continue;
        double cand = dp[mask ^ (std::size_t{1} << s)] + weight(s, j);
        if (cand > best) {
          best = cand;
          pick = static_cast<std::uint8_t>(s);
        }
      }
      next[mask] = best;
      choice[j * masks + mask] = pick;
    }
    dp.swap(next);
  }

  std::size_t best_mask = 0;
  for (std::size_t mask = 1; mask < masks; ++mask) {
    if (dp[mask] > dp[best_mask]) best_mask = mask;
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t mask = best_mask;
  for (std::size_t j = n; j-- > 0;) {
    std::uint8_t s = choice[j * masks + mask];
    if (s == m) continue;
    if (weight(s, j) > 0.0) {
      out.push_back(transposed ? std::make_pair(j, static_cast<std::size_t>(s))
                               : std::make_pair(static_cast<std::size_t>(s), j));
    }
    mask ^= std::size_t{1} << s;
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

// Event-marching view of one annotation: per-frame active speaker counts.
class TimelineSweep {
 public:
  explicit TimelineSweep(const Annotation& a) {
    std::map<std::string, std::size_t> ids;
    for (const Turn& t : a.turns) {
      auto [it, fresh] = ids.emplace(t.speaker, ids.size());
      std::size_t id = it->second;
      (void)fresh;
      events_.push_back({t.span.start, id, +1});
      events_.push_back({t.span.end, id, -1});
    }
    std::sort(events_.begin(), events_.end(), [](const Event& x, const Event& y) {
      if (x.time != y.time) return x.time < y.time;
      return x.delta < y.delta;  // close before open at shared instants
    });
    active_.assign(ids.size(), 0);
    names_.resize(ids.size());
    for (const auto& [name, id] : ids) names_[id] = name;
  }

  // Advances to time t (nondecreasing across calls) and exposes counts.
  void advance(double t) {
    while (cursor_ < events_.size() && events_[cursor_].time <= t) {
      const Event& e = events_[cursor_++];
      active_[e.speaker] += e.delta;
      total_ += e.delta;
    }
  }

  int total_active() const { return total_; }
  bool is_active(std::size_t speaker) const { return active_[speaker] > 0; }
  std::size_t num_speakers() const { return active_.size(); }
  const std::string& name(std::size_t id) const { return names_[id]; }
  double last_event_time() const {
    return events_.empty() ? 0.0 : events_.back().time;
  }

 private:
  struct Event {
    double time;
    std::size_t speaker;
    int delta;
  };
  std::vector<Event> events_;
  std::vector<int> active_;
  std::vector<std::string> names_;
  std::size_t cursor_ = 0;
  int total_ = 0;
};

// Merged half-open bands (b - collar, b + collar) around reference
// boundaries, queried by marching in time order.
class CollarMask {
 public:
  CollarMask(const Annotation& reference, double collar) {
    if (collar <= 0) return;
    std::vector<std::pair<double, double>> bands;
    for (const Turn& t : reference.turns) {
      bands.emplace_back(t.span.start - collar, t.span.start + collar);
      bands.emplace_back(t.span.end - collar, t.span.end + collar);
    }
    std::sort(bands.begin(), bands.end());
    for (const auto& b : bands) {
      if (!merged_.empty() && b.first <= merged_.back().second) {
        merged_.back().second = std::max(merged_.back().second, b.second);
      } else {
        merged_.push_back(b);
      }
    }
  }

  bool excluded(double t) {
    while (cursor_ < merged_.size() && merged_[cursor_].second <= t) ++cursor_;
    return cursor_ < merged_.size() && merged_[cursor_].first < t;
  }

 private:
  std::vector<std::pair<double, double>> merged_;
  std::size_t cursor_ = 0;
};

}  // namespace detail

// One-to-one partial map from hypothesis speakers to reference speakers
// maximizing co-active time, computed on the full timelines.
inline std::map<std::string, std::string> optimal_speaker_map(
    const Annotation& reference, const Annotation& hypothesis) {
  Annotation ref = canonicalize(reference);
  Annotation hyp = canonicalize(hypothesis);
  auto ref_by = ref.by_speaker();
  auto hyp_by = hyp.by_speaker();
  std::vector<std::string> ref_names, hyp_names;
  for (const auto& [name, turns] : ref_by) ref_names.push_back(name);
  for (const auto& [name, turns] : hyp_by) hyp_names.push_back(name);

  std::vector<std::vector<double>> overlap(ref_names.size(),
                                           std::vector<double>(hyp_names.size(), 0.0));
  for (std::size_t r = 0; r < ref_names.size(); ++r) {
    for (std::size_t h = 0; h < hyp_names.size(); ++h) {
      double acc = 0.0;
      for (const Interval& a : ref_by[ref_names[r]])
        for (const Interval& b : hyp_by[hyp_names[h]]) acc += intersection_length(a, b);
      overlap[r][h] = acc;
    }
  }
  std::map<std::string, std::string> out;
  for (auto [r, h] : optimal_assignment(overlap)) out[hyp_names[h]] = ref_names[r];
  return out;
}

// Frame-sampled diarization error rate. Time is discretized at frame
// midpoints (i + 0.5) * step; a frame is dropped when its midpoint falls
// within collar_s of any reference turn boundary. The hypothesis-to-
// reference speaker map maximizes correct time over the scored frames.
inline DerReport der(const Annotation& reference, const Annotation& hypothesis,
                     const ScoringConfig& cfg = {}) {
  cfg.validate();
  Annotation ref = canonicalize(reference);
  Annotation hyp = canonicalize(hypothesis);
  const double step = cfg.frame_step_s;

  double end_time = 0.0;
  for (const Turn& t : ref.turns) end_time = std::max(end_time, t.span.end);
  for (const Turn& t : hyp.turns) end_time = std::max(end_time, t.span.end);
  const std::size_t frames =
      static_cast<std::size_t>(std::ceil(end_time / step)) + 1;

  // Pass 1: co-presence matrix on scored frames.
  std::vector<std::vector<double>> overlap;
  {
    detail::TimelineSweep rsweep(ref), hsweep(hyp);
    detail::CollarMask mask(ref, cfg.collar_s);
    overlap.assign(rsweep.num_speakers(),
                   std::vector<double>(hsweep.num_speakers(), 0.0));
    for (std::size_t i = 0; i < frames; ++i) {
      double t = (i + 0.5) * step;
      rsweep.advance(t);
      hsweep.advance(t);
      if (mask.excluded(t)) continue;
      int nref = rsweep.total_active();
      if (!cfg.score_overlap && nref >= 2) continue;
      if (nref == 0 || hsweep.total_active() == 0) continue;
      for (std::size_t r = 0; r < rsweep.num_speakers(); ++r) {
        if (!rsweep.is_active(r)) continue;
        for (std::size_t h = 0; h < hsweep.num_speakers(); ++h) {
          if (hsweep.is_active(h)) overlap[r][h] += step;
        }
      }
    }
  }
  auto pairs = optimal_assignment(overlap);

  // Pass 2: per-frame counting with the fixed map.
  detail::TimelineSweep rsweep(ref), hsweep(hyp);
  detail::CollarMask mask(ref, cfg.collar_s);
  std::vector<int> ref_partner(rsweep.num_speakers(), -1);
  for (auto [r, h] : pairs) ref_partner[r] = static_cast<int>(h);

  double miss_t = 0, fa_t = 0, conf_t = 0, speaker_t = 0, speech_t = 0;
  double sad_miss_t = 0, sad_fa_t = 0;
  for (std::size_t i = 0; i < frames; ++i) {
    double t = (i + 0.5) * step;
    rsweep.advance(t);
    hsweep.advance(t);
    if (mask.excluded(t)) continue;
    int nref = rsweep.total_active();
    if (!cfg.score_overlap && nref >= 2) continue;
    int nhyp = hsweep.total_active();
    if (nref == 0 && nhyp == 0) continue;

    speaker_t += nref * step;
    if (nref >= 1) {
      speech_t += step;
      if (nhyp == 0) sad_miss_t += step;
    } else if (nhyp >= 1) {
      sad_fa_t += step;
    }
    int correct = 0;
    for (std::size_t r = 0; r < rsweep.num_speakers(); ++r) {
      if (rsweep.is_active(r) && ref_partner[r] >= 0 &&
          hsweep.is_active(static_cast<std::size_t>(ref_partner[r])))
        ++correct;
    }
    miss_t += std::max(0, nref - nhyp) * step;
    fa_t += std::max(0, nhyp - nref) * step;
    conf_t += (std::min(nref, nhyp) - correct) * step;
  }

  if (speaker_t <= 0.0)
    throw DataError("der: no reference speech left after collar exclusion");
  DerReport out;
  out.miss = miss_t / speaker_t;
  out.false_alarm = fa_t / speaker_t;
  out.confusion = conf_t / speaker_t;
  out.der = out.miss + out.false_alarm + out.confusion;
  out.sad_miss = sad_miss_t / speech_t;
  out.sad_false_alarm = sad_fa_t / speech_t;
  out.scored_time = speaker_t;
  out.scored_speech_time = speech_t;
  return out;
}

// Exact interval-sweep overlap statistics of one annotation.
inline OverlapStats overlap_stats(const Annotation& reference) {
  Annotation ref = canonicalize(reference);
  if (ref.turns.empty()) throw DataError("overlap_stats: no speech");
  std::vector<std::pair<double, int>> events;
  for (const Turn& t : ref.turns) {
    events.emplace_back(t.span.start, +1);
    events.emplace_back(t.span.end, -1);
  }
  std::sort(events.begin(), events.end());
  OverlapStats out;
  int active = 0;
  double prev = events.front().first;
  for (const auto& [time, delta] : events) {
    double span = time - prev;
    if (span > 0) {
      if (active >= 1) out.t_spk_ge1 += span;
      if (active >= 2) out.t_spk_ge2 += span;
    }
    active += delta;
    prev = time;
  }
  if (out.t_spk_ge1 <= 0.0) throw DataError("overlap_stats: no speech");
  out.overlap_ratio = out.t_spk_ge2 / out.t_spk_ge1;
  return out;
}

// Time-weighted corpus aggregate: error seconds are summed per component
// and re-divided by the summed denominators.
inline DerReport aggregate_reports(const std::vector<DerReport>& reports) {
  DerReport out;
  double miss_t = 0, fa_t = 0, conf_t = 0, sad_miss_t = 0, sad_fa_t = 0;
  for (const DerReport& r : reports) {
    miss_t += r.miss * r.scored_time;
    fa_t += r.false_alarm * r.scored_time;
    conf_t += r.confusion * r.scored_time;
    sad_miss_t += r.sad_miss * r.scored_speech_time;
    sad_fa_t += r.sad_false_alarm * r.scored_speech_time;
    out.scored_time += r.scored_time;
    out.scored_speech_time += r.scored_speech_time;
  }
  if (out.scored_time <= 0.0) throw DataError("aggregate_reports: nothing scored");
  out.miss = miss_t / out.scored_time;
  out.false_alarm = fa_t / out.scored_time;
  out.confusion = conf_t / out.scored_time;
  out.der = out.miss + out.false_alarm + out.confusion;
  out.sad_miss = sad_miss_t / out.scored_speech_time;
  out.sad_false_alarm = sad_fa_t / out.scored_speech_time;
  return out;
}

struct ScoredRecording {
  std::string id;
  DerReport report;
};

// Aligned percent table, DER decomposed into MI/FA/CF plus SAD errors.
inline std::string format_der_table(const std::vector<ScoredRecording>& rows,
                                    const DerReport& total) {
  std::string out;
  char line[256];
  std::size_t width = 9;
  for (const auto& r : rows) width = std::max(width, r.id.size());
  std::snprintf(line, sizeof(line), "%-*s %8s %8s %8s %8s %8s %8s\n",
                static_cast<int>(width), "recording", "DER%", "MI%", "FA%", "CF%",
                "SADMI%", "SADFA%");
  out += line;
  auto emit = [&](const std::string& id, const DerReport& r) {
    std::snprintf(line, sizeof(line),
                  "%-*s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n",
                  static_cast<int>(width), id.c_str(), 100 * r.der, 100 * r.miss,
                  100 * r.false_alarm, 100 * r.confusion, 100 * r.sad_miss,
                  100 * r.sad_false_alarm);
    out += line;
  };
  for (const auto& r : rows) emit(r.id, r.report);
  emit("TOTAL", total);
  return out;
}

// One key=value line per recording plus a total line, machine readable.
inline std::string format_der_keyvalues(const std::vector<ScoredRecording>& rows,
                                        const DerReport& total,
                                        const ScoringConfig& cfg) {
  std::string out;
  char line[320];
  auto emit = [&](const std::string& id, const DerReport& r) {
    std::snprintf(line, sizeof(line),
                  "recording=%s collar=%g score_overlap=%d der=%.6f miss=%.6f "
                  "false_alarm=%.6f confusion=%.6f sad_miss=%.6f "
                  "sad_false_alarm=%.6f scored_time=%.3f\n",
                  id.c_str(), cfg.collar_s, cfg.score_overlap ? 1 : 0, r.der, r.miss,
                  r.false_alarm, r.confusion, r.sad_miss, r.sad_false_alarm,
                  r.scored_time);
    out += line;
  };
  for (const auto& r : rows) emit(r.id, r.report);
  emit("TOTAL", total);
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_SCORING_HPP_
