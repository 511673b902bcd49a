#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "fednas/codec.hpp"
#include "fednas/errors.hpp"
#include "fednas/nsga2.hpp"

namespace fednas {

struct IndividualLog {
  ChoiceKey key;
  Genome genome;
  double test_error = 0.0;
  long long macs = 0;
  int rank = -1;
  double crowding = 0.0;
};

// One row per generation. Wall-clock time is reported in the timings file,
// not in the metrics stream, so metrics files are reproducible byte-for-byte
// under a fixed seed.
struct MetricsRecord {
  std::int64_t generation = 0;
  std::vector<IndividualLog> individuals;  // parents + offspring, 2N entries
  int best_index = -1;  // highest test accuracy
  int knee_index = -1;  // knee of the first front
  int aggregations = 0;
  long uploads = 0;
  long master_downloads = 0;
  long long bytes_uploaded = 0;
  long long bytes_downloaded = 0;
  double wall_seconds = 0.0;
};

// Knee selection on a non-dominated front: min-max normalize both objectives
// and return the point with the largest perpendicular distance to the chord
// joining the lowest-error and lowest-MACs extremes. Fronts with at most two
// points fall back to the lowest-error point; ties prefer lower MACs.
inline std::size_t select_knee(const std::vector<Objectives>& front) {
  if (front.empty()) throw StructuralError("knee selection on an empty front");
  const auto prefer = [&](std::size_t a, std::size_t b) {
    if (front[a][0] != front[b][0]) return front[a][0] < front[b][0];
    return front[a][1] < front[b][1];
  };
  std::size_t lowest_error = 0;
  for (std::size_t i = 1; i < front.size(); ++i) {
    if (prefer(i, lowest_error)) lowest_error = i;
  }
  if (front.size() <= 2) return lowest_error;

  double min0 = front[0][0], max0 = front[0][0];
  double min1 = front[0][1], max1 = front[0][1];
  for (const Objectives& p : front) {
    min0 = std::min(min0, p[0]);
    max0 = std::max(max0, p[0]);
    min1 = std::min(min1, p[1]);
    max1 = std::max(max1, p[1]);
  }
  const double r0 = max0 - min0, r1 = max1 - min1;
  const auto norm = [&](const Objectives& p) {
    return Objectives{r0 > 0.0 ? (p[0] - min0) / r0 : 0.0,
                      r1 > 0.0 ? (p[1] - min1) / r1 : 0.0};
  };

  std::size_t lowest_macs = 0;
  for (std::size_t i = 1; i < front.size(); ++i) {
    if (front[i][1] < front[lowest_macs][1] ||
        (front[i][1] == front[lowest_macs][1] && front[i][0] < front[lowest_macs][0])) {
      lowest_macs = i;
    }
  }
  const Objectives a = norm(front[lowest_error]);
  const Objectives b = norm(front[lowest_macs]);
  const double abx = b[0] - a[0], aby = b[1] - a[1];
  const double ab_len = std::sqrt(abx * abx + aby * aby);

  std::size_t best = lowest_error;
  double best_dist = -1.0;
  for (std::size_t i = 0; i < front.size(); ++i) {
    const Objectives p = norm(front[i]);
    const double dist =
        ab_len > 0.0
            ? std::abs(abx * (p[1] - a[1]) - aby * (p[0] - a[0])) / ab_len
            : 0.0;
    if (dist > best_dist || (dist == best_dist && prefer(i, best))) {
      best_dist = dist;
      best = i;
    }
  }
  return best;
}

namespace detail {

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw FormatError("cannot parse number: " + s);
  }
  return v;
}

}  // namespace detail

// Front file: one row per individual, ordered by (macs asc, error asc,
// genome). The key column is quoted because keys contain commas.
inline void export_front(const std::vector<IndividualLog>& front,
                         const std::string& path) {
  std::vector<std::size_t> order(front.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (front[a].macs != front[b].macs) return front[a].macs < front[b].macs;
    if (front[a].test_error != front[b].test_error) {
      return front[a].test_error < front[b].test_error;
    }
    return front[a].genome < front[b].genome;
  });
  std::ofstream out(path);
  if (!out) throw IoError("cannot open front file for writing: " + path);
  out << "key,test_error,macs,rank,crowding\n";
  for (const std::size_t i : order) {
    const IndividualLog& ind = front[i];
    out << '"' << key_to_string(ind.key) << "\","
        << detail::format_double(ind.test_error) << "," << ind.macs << ","
        << ind.rank << "," << detail::format_double(ind.crowding) << "\n";
  }
  if (!out) throw IoError("failed writing front file: " + path);
}

inline std::vector<IndividualLog> load_front(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open front file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "key,test_error,macs,rank,crowding") {
    throw FormatError("bad front file header");
  }
  std::vector<IndividualLog> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() != '"') throw FormatError("front row must start with a quoted key");
    const std::size_t close = line.find('"', 1);
    if (close == std::string::npos) throw FormatError("unterminated key quote");
    IndividualLog ind;
    ind.key = key_from_string(line.substr(1, close - 1));
    ind.genome = encode(ind.key);
    std::vector<std::string> fields;
    std::size_t pos = close + 2;  // skip closing quote and comma
    while (pos <= line.size()) {
      std::size_t next = line.find(',', pos);
      if (next == std::string::npos) next = line.size();
      fields.push_back(line.substr(pos, next - pos));
      pos = next + 1;
    }
    if (fields.size() != 4) throw FormatError("front row must have 5 columns");
    ind.test_error = detail::parse_double(fields[0]);
    ind.macs = std::stoll(fields[1]);
    ind.rank = std::stoi(fields[2]);
    ind.crowding = detail::parse_double(fields[3]);
    rows.push_back(std::move(ind));
  }
  return rows;
}

}  // namespace fednas
