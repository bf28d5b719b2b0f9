#pragma once

// Home detection, visit tagging and SES labelling of users and places.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segmob/common.hpp"
#include "segmob/ingest.hpp"
#include "segmob/spatial.hpp"
#include "segmob/timeline.hpp"

namespace segmob {

struct HomeAssignment {
  std::string user_id;
  std::string home_region;
  double night_hours = 0;     // qualifying night-window hours spent at home_region
  int qualifying_nights = 0;  // distinct nights with a qualifying stay there
  friend bool operator==(const HomeAssignment&, const HomeAssignment&) = default;
};

enum class VisitKind { home, poi, other };

inline std::string_view to_string(VisitKind k) {
  switch (k) {
    case VisitKind::home: return "home";
    case VisitKind::poi: return "poi";
    case VisitKind::other: return "other";
  }
  return "other";
}

inline VisitKind parse_visit_kind(std::string_view s) {
  if (s == "home") return VisitKind::home;
  if (s == "poi") return VisitKind::poi;
  if (s == "other") return VisitKind::other;
  throw Error("unknown visit kind '" + std::string(s) + "'");
}

// One stay resolved to a region. Classes are 0 until labelled.
struct Visit {
  std::string user_id;
  std::string home_region;
  std::string region_id;
  int class_user = 0;
  int class_place = 0;
  std::int64_t start_ts = 0;
  std::int64_t end_ts = 0;
  VisitKind kind = VisitKind::other;
};

struct InferenceQa {
  std::size_t users = 0;
  std::size_t homes = 0;
  std::size_t tie_breaks = 0;
  std::size_t stays = 0;
  std::size_t stays_outside_map = 0;
  std::size_t visits = 0;

  void merge(const InferenceQa& o) {
    users += o.users;
    homes += o.homes;
    tie_breaks += o.tie_breaks;
    stays += o.stays;
    stays_outside_map += o.stays_outside_map;
    visits += o.visits;
  }
  double home_yield() const { return users ? static_cast<double>(homes) / static_cast<double>(users) : 0.0; }
};

namespace detail {

struct Segment {
  std::size_t region;
  std::int64_t start;
  std::int64_t end;
};

// Daily local-time window [start, end); wraps past midnight when end <= start.
struct DailyWindow {
  std::int64_t start_s;
  std::int64_t end_s;

  DailyWindow(TimeOfDay start, TimeOfDay end)
      : start_s(start.minutes * 60LL), end_s(end.minutes * 60LL + (end <= start ? kSecondsPerDay : 0)) {}

  // Invokes fn(local_day, overlap_seconds) for every day whose window
  // overlaps the local interval [a, b]. The window of day d opens on day d.
  template <typename Fn>
  void for_each_overlap(std::int64_t a, std::int64_t b, Fn&& fn) const {
    const std::int64_t first = floor_div(a, kSecondsPerDay) - 1, last = floor_div(b, kSecondsPerDay);
    for (std::int64_t d = first; d <= last; ++d) {
      const std::int64_t ws = d * kSecondsPerDay + start_s, we = d * kSecondsPerDay + end_s;
      const std::int64_t lo = std::max(a, ws), hi = std::min(b, we);
      if (hi > lo || (a == b && a >= ws && a < we)) fn(d, hi > lo ? hi - lo : 0);
    }
  }
};

}  // namespace detail

// Home = region where the user spends the most night time, counting only
// stays that cover at least `min_home_hours` of a single night window.
// Touching stays in the same region (gap <= coalesce_gap_seconds) are merged
// first. Ties go to more qualifying nights, then the smaller region_id.
inline std::optional<HomeAssignment> infer_home(std::span<const TrajectoryRecord> stays, const RunConfig& config,
                                                const SpatialIndex& index, InferenceQa* qa = nullptr) {
  if (qa) ++qa->users;
  if (stays.empty()) return std::nullopt;
  std::vector<detail::Segment> located;
  located.reserve(stays.size());
  for (const auto& s : stays)
    if (auto idx = index.locate_index(s.lon, s.lat)) located.push_back({*idx, s.start_ts, s.end_ts});
  std::sort(located.begin(), located.end(), [](const auto& a, const auto& b) {
    if (a.start != b.start) return a.start < b.start;
    if (a.end != b.end) return a.end < b.end;
    return a.region < b.region;
  });

  std::vector<detail::Segment> merged;
  for (const auto& s : located) {
    if (!merged.empty() && merged.back().region == s.region && s.start - merged.back().end <= config.coalesce_gap_seconds) {
      merged.back().end = std::max(merged.back().end, s.end);
    } else {
      merged.push_back(s);
    }
  }

  struct Tally {
    std::int64_t seconds = 0;
    std::set<std::int64_t> nights;
  };
  std::map<std::size_t, Tally> tallies;
  const detail::DailyWindow night(config.night_start, config.night_end);
  const auto threshold = static_cast<std::int64_t>(std::llround(config.min_home_hours * 3600.0));
  for (const auto& seg : merged) {
    const auto a = to_local_seconds(seg.start, config.utc_offset_minutes);
    const auto b = to_local_seconds(seg.end, config.utc_offset_minutes);
    night.for_each_overlap(a, b, [&](std::int64_t day, std::int64_t overlap) {
      if (overlap >= threshold) {
        auto& t = tallies[seg.region];
        t.seconds += overlap;
        t.nights.insert(day);
      }
    });
  }
  if (tallies.empty()) return std::nullopt;

  const auto& regions = index.regions();
  auto better = [&](const auto& a, const auto& b) {
    if (a.second.seconds != b.second.seconds) return a.second.seconds > b.second.seconds;
    if (a.second.nights.size() != b.second.nights.size()) return a.second.nights.size() > b.second.nights.size();
    return regions[a.first].region_id < regions[b.first].region_id;
  };
  auto best = tallies.begin();
  for (auto it = std::next(tallies.begin()); it != tallies.end(); ++it)
    if (better(*it, *best)) best = it;
  const bool tie = std::count_if(tallies.begin(), tallies.end(), [&](const auto& t) {
                     return t.second.seconds == best->second.seconds;
                   }) > 1;
  if (qa) {
    ++qa->homes;
    if (tie) ++qa->tie_breaks;
  }
  return HomeAssignment{stays.front().user_id, regions[best->first].region_id,
                        static_cast<double>(best->second.seconds) / 3600.0,
                        static_cast<int>(best->second.nights.size())};
}

// One Visit per stay that falls inside the map. Stays in the home region are
// `home`; other stays overlapping a weekday POI window are `poi`; the rest
// are `other`.
inline std::vector<Visit> extract_visits(std::span<const TrajectoryRecord> stays, const HomeAssignment& home,
                                         const SpatialIndex& index, const RunConfig& config, InferenceQa* qa = nullptr) {
  std::vector<const TrajectoryRecord*> sorted;
  sorted.reserve(stays.size());
  for (const auto& s : stays) sorted.push_back(&s);
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
    return a->start_ts != b->start_ts ? a->start_ts < b->start_ts : a->end_ts < b->end_ts;
  });

  const detail::DailyWindow poi(config.poi_start, config.poi_end);
  std::vector<Visit> out;
  out.reserve(stays.size());
  for (const auto* s : sorted) {
    if (qa) ++qa->stays;
    const SesRegion* region = index.locate(s->lon, s->lat);
    if (!region) {
      if (qa) ++qa->stays_outside_map;
      continue;
    }
    Visit v;
    v.user_id = s->user_id;
    v.home_region = home.home_region;
    v.region_id = region->region_id;
    v.start_ts = s->start_ts;
    v.end_ts = s->end_ts;
    if (region->region_id == home.home_region) {
      v.kind = VisitKind::home;
    } else {
      bool in_poi = false;
      poi.for_each_overlap(to_local_seconds(s->start_ts, config.utc_offset_minutes),
                           to_local_seconds(s->end_ts, config.utc_offset_minutes),
                           [&](std::int64_t day, std::int64_t) {
                             if (weekday(Date{static_cast<std::int32_t>(day)}) < 5) in_poi = true;
                           });
      v.kind = in_poi ? VisitKind::poi : VisitKind::other;
    }
    out.push_back(std::move(v));
  }
  if (qa) qa->visits += out.size();
  return out;
}

struct LabeledPopulation {
  int n_classes = 10;
  std::map<std::string, int, std::less<>> user_class;
  std::map<std::string, std::string, std::less<>> user_home;
  std::map<std::string, int, std::less<>> place_class;
  std::size_t users_without_home = 0;

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(n_classes), 0);
    for (const auto& [u, c] : user_class) ++h[static_cast<std::size_t>(c - 1)];
    return h;
  }
};

// User class = people-decile class of the home region; place class =
// place-decile class of the region. Users without a home are only counted.
inline LabeledPopulation label_population(std::span<const std::optional<HomeAssignment>> homes,
                                          const DecileAssignment& people, const DecileAssignment& places) {
  LabeledPopulation out;
  out.n_classes = people.n_classes;
  std::set<std::string> missing;
  for (const auto& h : homes) {
    if (!h) {
      ++out.users_without_home;
      continue;
    }
    auto c = people.find(h->home_region);
    if (!c) {
      missing.insert(h->home_region);
      continue;
    }
    out.user_class[h->user_id] = *c;
    out.user_home[h->user_id] = h->home_region;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error("home regions without SES data: " + list);
  }
  out.place_class.insert(places.classes.begin(), places.classes.end());
  return out;
}

// Fills class_user / class_place; returns false if either is unknown.
inline bool apply_labels(Visit& v, const LabeledPopulation& pop) {
  auto u = pop.user_class.find(v.user_id);
  auto p = pop.place_class.find(v.region_id);
  if (u == pop.user_class.end() || p == pop.place_class.end()) return false;
  v.class_user = u->second;
  v.class_place = p->second;
  return true;
}

}  // namespace segmob
