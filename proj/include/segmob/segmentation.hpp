#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "segmob/common.hpp"
#include "segmob/ingest.hpp"
#include "segmob/timeline.hpp"

namespace segmob {

// Validates config periods: each start <= end, listed chronologically, no overlap.
inline std::vector<Period> segment(std::span<const Period> periods) {
  if (periods.empty()) throw Error("at least one period is required");
  std::vector<Period> out(periods.begin(), periods.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].start > out[i].end)
      throw Error("period '" + out[i].label + "' ends before it starts");
    if (i > 0) {
      const auto& prev = out[i - 1];
      if (out[i].start <= prev.end) {
        if (out[i].start >= prev.start) throw Error("periods '" + prev.label + "' and '" + out[i].label + "' overlap");
        throw Error("periods are not in chronological order: '" + out[i].label + "' precedes '" + prev.label + "'");
      }
    }
  }
  return out;
}

inline std::optional<std::size_t> period_of(std::span<const Period> periods, Date d) {
  auto it = std::upper_bound(periods.begin(), periods.end(), d, [](Date key, const Period& p) { return key < p.start; });
  if (it == periods.begin()) return std::nullopt;
  --it;
  if (!it->contains(d)) return std::nullopt;
  return static_cast<std::size_t>(it - periods.begin());
}

// All windows of `window_days` fully inside [first, last], ending on
// first + window_days - 1 and every `slide_days` after that.
inline std::vector<Window> windows(Date first, Date last, int window_days, int slide_days) {
  if (window_days < 1 || slide_days < 1) throw Error("window_days and slide_days must be >= 1");
  const int range = last - first + 1;
  if (range < window_days)
    throw Error("date range of " + std::to_string(range) + " days is shorter than the " + std::to_string(window_days) +
                "-day window");
  std::vector<Window> out;
  for (Date end = first + (window_days - 1); end <= last; end = end + slide_days)
    out.push_back(Window{end - (window_days - 1), end});
  return out;
}

// Days on which any restriction level moved by at least `min_jump` relative
// to the previous record.
inline std::vector<Date> suggest_breakpoints(std::span<const StringencyRecord> records, double min_jump) {
  std::vector<Date> out;
  for (std::size_t i = 1; i < records.size(); ++i) {
    for (std::size_t k = 0; k < kRestrictionCount; ++k) {
      if (std::abs(records[i].levels[k] - records[i - 1].levels[k]) >= min_jump) {
        out.push_back(records[i].date);
        break;
      }
    }
  }
  return out;
}

}  // namespace segmob
