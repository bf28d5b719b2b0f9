#pragma once

// Visit networks, stratification matrices, assortativity and residual
// isolation.
//
// Matrices are n x n, row = place class j, column = user class i, stored
// row-major with 0-based indices (class label c sits at index c - 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "segmob/common.hpp"
#include "segmob/inference.hpp"
#include "segmob/segmentation.hpp"
#include "segmob/timeline.hpp"

namespace segmob {

using ZoneMap = std::map<std::string, std::string, std::less<>>;  // region_id -> zone

class VisitFilter {
 public:
  enum class Kind { all, exclude_home, poi_only, intra_zone, inter_zone };

  VisitFilter() = default;
  static VisitFilter all() { return VisitFilter(Kind::all); }
  static VisitFilter exclude_home() { return VisitFilter(Kind::exclude_home); }
  static VisitFilter poi_only() { return VisitFilter(Kind::poi_only); }
  static VisitFilter intra_zone(std::string zone) {
    VisitFilter f(Kind::intra_zone);
    f.zone_a_ = std::move(zone);
    return f;
  }
  static VisitFilter inter_zone(std::string a, std::string b) {
    VisitFilter f(Kind::inter_zone);
    f.zone_a_ = std::move(a);
    f.zone_b_ = std::move(b);
    return f;
  }

  // "all" | "exclude_home" | "poi_only" | "intra:<zone>" | "inter:<zone>|<zone>"
  static VisitFilter parse(std::string_view spec) {
    if (spec == "all") return all();
    if (spec == "exclude_home") return exclude_home();
    if (spec == "poi_only") return poi_only();
    if (spec.substr(0, 6) == "intra:" && spec.size() > 6) return intra_zone(std::string(spec.substr(6)));
    if (spec.substr(0, 6) == "inter:") {
      auto rest = spec.substr(6);
      auto bar = rest.find('|');
      if (bar != std::string_view::npos && bar > 0 && bar + 1 < rest.size())
        return inter_zone(std::string(rest.substr(0, bar)), std::string(rest.substr(bar + 1)));
    }
    throw Error("unknown visit filter '" + std::string(spec) + "'");
  }

  Kind kind() const { return kind_; }

  // File-name safe identifier.
  std::string name() const {
    switch (kind_) {
      case Kind::all: return "all";
      case Kind::exclude_home: return "exclude_home";
      case Kind::poi_only: return "poi_only";
      case Kind::intra_zone: return "intra_" + zone_a_;
      case Kind::inter_zone: return "inter_" + zone_a_ + "_" + zone_b_;
    }
    return "all";
  }

  bool needs_zones() const { return kind_ == Kind::intra_zone || kind_ == Kind::inter_zone; }

  bool accepts(const Visit& v, const ZoneMap* zones = nullptr) const {
    switch (kind_) {
      case Kind::all: return true;
      case Kind::exclude_home: return v.kind != VisitKind::home;
      case Kind::poi_only: return v.kind == VisitKind::poi;
      case Kind::intra_zone:
      case Kind::inter_zone: {
        const std::string_view home = zone_of(v.home_region, zones), place = zone_of(v.region_id, zones);
        if (kind_ == Kind::intra_zone) return home == zone_a_ && place == zone_a_;
        return (home == zone_a_ && place == zone_b_) || (home == zone_b_ && place == zone_a_);
      }
    }
    return false;
  }

 private:
  explicit VisitFilter(Kind k) : kind_(k) {}

  static std::string_view zone_of(const std::string& region, const ZoneMap* zones) {
    if (zones) {
      auto it = zones->find(region);
      if (it != zones->end()) return it->second;
    }
    return region;
  }

  Kind kind_ = Kind::all;
  std::string zone_a_, zone_b_;
};

// Class-pair visit tallies; the reduction behind every matrix. Merging is
// commutative and associative, so shards can be aggregated in any order.
struct ClassCounts {
  int n = 10;
  std::vector<std::uint64_t> counts;  // [place - 1][user - 1]

  explicit ClassCounts(int n_classes = 10) : n(n_classes), counts(static_cast<std::size_t>(n_classes) * n_classes, 0) {}

  void add(int class_user, int class_place, std::uint64_t weight = 1) {
    if (class_user < 1 || class_user > n || class_place < 1 || class_place > n)
      throw Error("class label out of range: user " + std::to_string(class_user) + ", place " +
                  std::to_string(class_place));
    counts[static_cast<std::size_t>(class_place - 1) * n + (class_user - 1)] += weight;
  }
  std::uint64_t at(int place_idx, int user_idx) const { return counts[static_cast<std::size_t>(place_idx) * n + user_idx]; }
  void merge(const ClassCounts& o) {
    if (o.n != n) throw Error("cannot merge class counts of different sizes");
    for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += o.counts[k];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  bool empty() const { return total() == 0; }
};

// Bipartite user -> place-region network for one period.
struct VisitNetwork {
  std::string period;
  int n_classes = 10;
  std::map<std::pair<std::string, std::string>, std::uint64_t> weights;  // (user, region) -> visits
  std::map<std::string, int, std::less<>> user_class;
  std::map<std::string, int, std::less<>> place_class;

  bool empty() const { return weights.empty(); }

  ClassCounts class_counts() const {
    ClassCounts c(n_classes);
    for (const auto& [edge, w] : weights) c.add(user_class.at(edge.first), place_class.at(edge.second), w);
    return c;
  }
};

// Aggregates labelled visits whose local start date falls in `period` and
// that pass `filter`. An empty result is returned as-is; matrix builders
// reject it.
inline VisitNetwork build_network(std::span<const Visit> visits, const Period& period, const VisitFilter& filter,
                                  int utc_offset_minutes = 0, const ZoneMap* zones = nullptr, int n_classes = 10) {
  VisitNetwork net;
  net.period = period.label;
  net.n_classes = n_classes;
  for (const auto& v : visits) {
    if (!period.contains(local_date(v.start_ts, utc_offset_minutes)) || !filter.accepts(v, zones)) continue;
    if (v.class_user < 1 || v.class_user > n_classes || v.class_place < 1 || v.class_place > n_classes)
      throw Error("visit of user '" + v.user_id + "' is not labelled with valid classes");
    const auto uc = net.user_class.emplace(v.user_id, v.class_user).first;
    const auto pc = net.place_class.emplace(v.region_id, v.class_place).first;
    if (uc->second != v.class_user) throw Error("user '" + v.user_id + "' carries two different classes");
    if (pc->second != v.class_place) throw Error("region '" + v.region_id + "' carries two different classes");
    ++net.weights[{v.user_id, v.region_id}];
  }
  return net;
}

struct StratificationMatrix {
  int n = 10;
  std::vector<double> a;    // [place - 1][user - 1], column-stochastic on active columns
  std::vector<bool> active; // per user class: column has any visits
  // Joint visit mass (counts / total, same layout). Assortativity is taken
  // over this; when empty, `a` rescaled to total 1 stands in.
  std::vector<double> mass;

  double at(int place_idx, int user_idx) const { return a[static_cast<std::size_t>(place_idx) * n + user_idx]; }
  std::size_t active_columns() const { return static_cast<std::size_t>(std::count(active.begin(), active.end(), true)); }
};

inline StratificationMatrix stratification_matrix(const ClassCounts& counts) {
  if (counts.empty()) throw DegenerateError("stratification matrix of an empty visit network");
  StratificationMatrix m;
  m.n = counts.n;
  m.a.assign(counts.counts.size(), 0.0);
  m.active.assign(static_cast<std::size_t>(counts.n), false);
  const double total = static_cast<double>(counts.total());
  m.mass.resize(counts.counts.size());
  for (std::size_t k = 0; k < counts.counts.size(); ++k) m.mass[k] = static_cast<double>(counts.counts[k]) / total;
  for (int i = 0; i < counts.n; ++i) {
    std::uint64_t col = 0;
    for (int j = 0; j < counts.n; ++j) col += counts.at(j, i);
    if (col == 0) continue;
    m.active[static_cast<std::size_t>(i)] = true;
    for (int j = 0; j < counts.n; ++j)
      m.a[static_cast<std::size_t>(j) * counts.n + i] = static_cast<double>(counts.at(j, i)) / static_cast<double>(col);
  }
  return m;
}

inline StratificationMatrix stratification_matrix(const VisitNetwork& net) {
  if (net.empty()) throw DegenerateError("stratification matrix of an empty visit network (period '" + net.period + "')");
  return stratification_matrix(net.class_counts());
}

// Pearson correlation of (user class, place class) under the joint mass
// obtained by rescaling `mass` (row = place, column = user) to total 1.
// Class labels 1..n serve as the numeric scores.
inline double assortativity(int n, std::span<const double> mass) {
  if (mass.size() != static_cast<std::size_t>(n) * n) throw Error("mass matrix has wrong size");
  double total = 0;
  for (double v : mass) {
    if (v < 0 || !std::isfinite(v)) throw Error("mass matrix entries must be finite and non-negative");
    total += v;
  }
  if (!(total > 0)) throw DegenerateError("assortativity of an all-zero matrix");
  double mean_i = 0, mean_j = 0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double w = mass[static_cast<std::size_t>(j) * n + i] / total;
      mean_i += w * (i + 1);
      mean_j += w * (j + 1);
    }
  double cov = 0, var_i = 0, var_j = 0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double w = mass[static_cast<std::size_t>(j) * n + i] / total;
      const double di = (i + 1) - mean_i, dj = (j + 1) - mean_j;
      cov += w * di * dj;
      var_i += w * di * di;
      var_j += w * dj * dj;
    }
  constexpr double kEps = 1e-15;
  if (var_i <= kEps || var_j <= kEps)
    throw DegenerateError("assortativity undefined: all mass in a single row or column");
  return std::clamp(cov / std::sqrt(var_i * var_j), -1.0, 1.0);
}

inline double assortativity(const StratificationMatrix& m) { return assortativity(m.n, m.mass.empty() ? m.a : m.mass); }

struct AdjustmentMatrix {
  int n = 10;
  std::vector<double> b;  // M(from) - M(to)
  std::string from;
  std::string to;

  double at(int place_idx, int user_idx) const { return b[static_cast<std::size_t>(place_idx) * n + user_idx]; }
};

inline AdjustmentMatrix adjustment_matrix(const StratificationMatrix& m1, const StratificationMatrix& m2,
                                          std::string label1 = {}, std::string label2 = {}) {
  if (m1.n != m2.n || m1.a.size() != m2.a.size()) throw Error("adjustment of matrices with mismatched dimensions");
  AdjustmentMatrix s;
  s.n = m1.n;
  s.from = std::move(label1);
  s.to = std::move(label2);
  s.b.resize(m1.a.size());
  for (std::size_t k = 0; k < m1.a.size(); ++k) s.b[k] = m1.a[k] - m2.a[k];
  return s;
}

struct ResidualIsolation {
  double mu_re = 0;      // -trace(S) / n; > 0 means more in-class visiting in the later period
  double raw_trace = 0;  // trace(S), unsigned by convention
};

inline ResidualIsolation residual_isolation(const AdjustmentMatrix& s) {
  ResidualIsolation out;
  for (int k = 0; k < s.n; ++k) out.raw_trace += s.at(k, k);
  out.mu_re = -out.raw_trace / s.n;
  if (out.mu_re == 0) out.mu_re = 0;  // no negative zero in reports
  return out;
}

// ---------------------------------------------------------------------------
// Day-resolved tallies, the common source of period matrices and windowed series.

struct DailyClassCounts {
  int n = 10;
  std::map<Date, ClassCounts> days;

  explicit DailyClassCounts(int n_classes = 10) : n(n_classes) {}

  void add(Date day, int class_user, int class_place, std::uint64_t weight = 1) {
    auto it = days.find(day);
    if (it == days.end()) it = days.emplace(day, ClassCounts(n)).first;
    it->second.add(class_user, class_place, weight);
  }
  void merge(const DailyClassCounts& o) {
    for (const auto& [d, c] : o.days) {
      auto it = days.find(d);
      if (it == days.end()) days.emplace(d, c);
      else it->second.merge(c);
    }
  }
  ClassCounts sum(Date first, Date last) const {
    ClassCounts out(n);
    for (auto it = days.lower_bound(first); it != days.end() && it->first <= last; ++it) out.merge(it->second);
    return out;
  }
};

inline DailyClassCounts daily_counts(std::span<const Visit> visits, const VisitFilter& filter, int utc_offset_minutes = 0,
                                     const ZoneMap* zones = nullptr, int n_classes = 10) {
  DailyClassCounts out(n_classes);
  for (const auto& v : visits)
    if (filter.accepts(v, zones)) out.add(local_date(v.start_ts, utc_offset_minutes), v.class_user, v.class_place);
  return out;
}

struct SeriesPoint {
  Date anchor;
  std::optional<double> r;  // empty for windows with a degenerate matrix
  std::uint64_t visits = 0;
};

inline std::vector<SeriesPoint> assortativity_series(const DailyClassCounts& daily, std::span<const Window> wins) {
  std::vector<SeriesPoint> out;
  out.reserve(wins.size());
  for (const auto& w : wins) {
    SeriesPoint pt{w.anchor(), std::nullopt, 0};
    const auto counts = daily.sum(w.start, w.end);
    pt.visits = counts.total();
    if (pt.visits > 0) {
      try {
        pt.r = assortativity(stratification_matrix(counts));
      } catch (const DegenerateError&) {
      }
    }
    out.push_back(pt);
  }
  return out;
}

inline std::vector<SeriesPoint> assortativity_series(std::span<const Visit> visits, std::span<const Window> wins,
                                                     const VisitFilter& filter, int utc_offset_minutes = 0,
                                                     const ZoneMap* zones = nullptr, int n_classes = 10) {
  return assortativity_series(daily_counts(visits, filter, utc_offset_minutes, zones, n_classes), wins);
}

}  // namespace segmob
