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

#ifndef RPDIAR_IO_HPP_
#define RPDIAR_IO_HPP_

// RTTM and manifest plumbing.
//
// RTTM lines are `SPEAKER <file> <chan> <tbeg> <tdur> <NA> <NA> <spk> <NA>
// <NA>`; onset and duration are written with exactly three decimals using
// round-half-even, so read(write(x)) equals canonicalize(x) within 1e-3 s per
// boundary. Manifests are tab-separated: id, feature path, RTTM path,
// duration seconds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rpdiar/annotation.hpp"
#include "rpdiar/common.hpp"

namespace rpdiar {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  try {
    std::size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": not a number: '" + tok + "'");
  }
}

}  // namespace detail

// Milliseconds after round-half-even; the integer form keeps the 3-decimal
// text rendering exact.
inline std::int64_t round_to_ms(double seconds) {
  return static_cast<std::int64_t>(std::nearbyint(seconds * 1000.0));
}

inline std::string format_ms(std::int64_t ms) {
  char buf[32];
  const char* sign = ms < 0 ? "-" : "";
  std::int64_t a = ms < 0 ? -ms : ms;
  std::snprintf(buf, sizeof(buf), "%s%lld.%03lld", sign,
                static_cast<long long>(a / 1000), static_cast<long long>(a % 1000));
  return buf;
}

// One line per turn, sorted by (file, onset, speaker), LF-terminated. Turns
// whose rounded duration is zero fall below the format's resolution and are
// dropped. Speaker labels and recording ids must be whitespace-free.
inline void write_rttm(const std::vector<Annotation>& annotations,
                       std::ostream& out) {
  struct Row {
    std::string file;
    std::int64_t onset_ms, dur_ms;
    std::string speaker;
  };
  std::vector<Row> rows;
  for (const Annotation& raw : annotations) {
    Annotation a = canonicalize(raw);
    std::string file = a.recording_id.empty() ? "unknown" : a.recording_id;
    if (file.find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("write_rttm: recording id contains whitespace: '" + file +
                      "'");
    }
    for (const Turn& t : a.turns) {
      if (t.speaker.empty() ||
          t.speaker.find_first_of(" \t\r\n") != std::string::npos) {
        throw DataError("write_rttm: bad speaker label: '" + t.speaker + "'");
      }
      if (t.span.start < 0.0) {
        throw DataError("write_rttm: negative onset in '" + file + "'");
      }
      std::int64_t onset = round_to_ms(t.span.start);
      std::int64_t dur = round_to_ms(t.span.end) - onset;
      if (dur <= 0) continue;
      rows.push_back(Row{file, onset, dur, t.speaker});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    if (x.file != y.file) return x.file < y.file;
    if (x.onset_ms != y.onset_ms) return x.onset_ms < y.onset_ms;
    if (x.speaker != y.speaker) return x.speaker < y.speaker;
    return x.dur_ms < y.dur_ms;
  });
  for (const Row& r : rows) {
    out << "SPEAKER " << r.file << " 1 " << format_ms(r.onset_ms) << ' '
        << format_ms(r.dur_ms) << " <NA> <NA> " << r.speaker << " <NA> <NA>\n";
  }
  if (!out) throw IoError("write_rttm: stream write failed");
}

inline void write_rttm(const std::vector<Annotation>& annotations,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF on all hosts
  if (!out) throw IoError("cannot write RTTM file: " + path);
  write_rttm(annotations, out);
  if (!out) throw IoError("failed while writing RTTM file: " + path);
}

inline void write_rttm(const Annotation& annotation, const std::string& path) {
  write_rttm(std::vector<Annotation>{annotation}, path);
}

// Parses SPEAKER lines and groups turns by file id; other line types are
// ignored. Malformed lines and non-positive durations name the line number.
inline std::map<std::string, Annotation> read_rttm(std::istream& in,
                                                   const std::string& name) {
  std::map<std::string, Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f = detail::split_ws(line);
    if (f.empty() || f[0] != "SPEAKER") continue;
    const std::string where = name + ":" + std::to_string(lineno);
    if (f.size() != 10) {
      throw IoError(where + ": SPEAKER line has " + std::to_string(f.size()) +
                    " fields, want 10");
    }
    double onset = detail::parse_double(f[3], where);
    double dur = detail::parse_double(f[4], where);
    if (onset < 0.0) throw IoError(where + ": negative onset");
    if (!(dur > 0.0)) throw IoError(where + ": non-positive duration");
    Annotation& a = out[f[1]];
    a.recording_id = f[1];
    a.turns.push_back(Turn{f[7], Interval(onset, onset + dur)});
  }
  return out;
}

inline std::map<std::string, Annotation> read_rttm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open RTTM file: " + path);
  return read_rttm(in, path);
}

// ---- manifests ----

struct ManifestEntry {
  std::string id;
  std::string feature_path;
  std::string rttm_path;
  double duration_s = 0.0;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path);
  for (const ManifestEntry& e : entries) {
    if (e.id.empty() || e.id.find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("write_manifest: bad id: '" + e.id + "'");
    }
    out << e.id << '\t' << e.feature_path << '\t' << e.rttm_path << '\t'
        << format_ms(round_to_ms(e.duration_s)) << '\n';
  }
  if (!out) throw IoError("failed while writing manifest: " + path);
}

// Manifest entries may store paths relative to the manifest file itself,
// which keeps corpora relocatable and byte-identical across output
// directories. Absolute paths pass through; relative ones resolve against
// the manifest's directory when a file exists there, else stay verbatim
// (covers manifests written with cwd-relative paths).
inline std::string resolve_manifest_path(const std::string& manifest_path,
                                         const std::string& p) {
  namespace fs = std::filesystem;
  fs::path q(p);
  if (q.is_absolute()) return p;
  fs::path near = fs::path(manifest_path).parent_path() / q;
  if (fs::exists(near)) return near.string();
  return p;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      std::size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) {
        f.push_back(detail::trim(line.substr(pos)));
        break;
      }
      f.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (f.size() != 4) {
      throw IoError(where + ": manifest line has " + std::to_string(f.size()) +
                    " fields, want 4 (id, features, rttm, duration)");
    }
    ManifestEntry e;
    e.id = f[0];
    e.feature_path = f[1];
    e.rttm_path = f[2];
    e.duration_s = detail::parse_double(f[3], where);
    if (e.id.empty()) throw IoError(where + ": empty id");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace rpdiar

#endif  // RPDIAR_IO_HPP_
