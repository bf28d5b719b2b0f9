#pragma once

#include <compare>
#include <cstdio>
#include <cstdint>
#include <string>
#include <string_view>

#include "segmob/common.hpp"

namespace segmob {

inline constexpr std::int64_t kSecondsPerDay = 86400;

// Calendar day, counted from 1970-01-01.
struct Date {
  std::int32_t days = 0;

  friend auto operator<=>(const Date&, const Date&) = default;
  Date operator+(int n) const { return Date{days + n}; }
  Date operator-(int n) const { return Date{days - n}; }
  friend int operator-(Date a, Date b) { return a.days - b.days; }
};

// Proleptic Gregorian conversions (H. Hinnant's days_from_civil).
constexpr Date from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return Date{era * 146097 + static_cast<int>(doe) - 719468};
}

struct CivilDate {
  int year;
  unsigned month;
  unsigned day;
};

constexpr CivilDate to_civil(Date date) {
  const int z = date.days + 719468;
  const int era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int y = static_cast<int>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : -9);
  return {y + (m <= 2), m, d};
}

// 0 = Monday ... 6 = Sunday.
constexpr int weekday(Date date) {
  int w = (date.days + 3) % 7;
  return w < 0 ? w + 7 : w;
}

inline Date parse_date(std::string_view text) {
  text = detail::trim(text);
  auto bad = [&] { return Error("invalid date '" + std::string(text) + "' (expected YYYY-MM-DD)"); };
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') throw bad();
  std::int64_t y = 0, m = 0, d = 0;
  if (!detail::parse_int64(text.substr(0, 4), y) || !detail::parse_int64(text.substr(5, 2), m) ||
      !detail::parse_int64(text.substr(8, 2), d))
    throw bad();
  if (m < 1 || m > 12 || d < 1 || d > 31) throw bad();
  Date out = from_civil(static_cast<int>(y), static_cast<unsigned>(m), static_cast<unsigned>(d));
  auto back = to_civil(out);
  if (back.month != static_cast<unsigned>(m) || back.day != static_cast<unsigned>(d)) throw bad();
  return out;
}

inline std::string format_date(Date date) {
  auto c = to_civil(date);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", c.year, c.month, c.day);
  return buf;
}

// Minutes after local midnight.
struct TimeOfDay {
  int minutes = 0;
  friend auto operator<=>(const TimeOfDay&, const TimeOfDay&) = default;
};

inline TimeOfDay parse_time_of_day(std::string_view text) {
  text = detail::trim(text);
  std::int64_t h = 0, m = 0;
  auto colon = text.find(':');
  if (colon == std::string_view::npos || !detail::parse_int64(text.substr(0, colon), h) ||
      !detail::parse_int64(text.substr(colon + 1), m) || h < 0 || h > 24 || m < 0 || m > 59 || (h == 24 && m != 0))
    throw Error("invalid time of day '" + std::string(text) + "' (expected HH:MM)");
  return TimeOfDay{static_cast<int>(h * 60 + m)};
}

inline std::string format_time_of_day(TimeOfDay t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d:%02d", t.minutes / 60, t.minutes % 60);
  return buf;
}

// Local clock = UTC + fixed offset; no DST.
inline std::int64_t to_local_seconds(std::int64_t utc_ts, int utc_offset_minutes) {
  return utc_ts + static_cast<std::int64_t>(utc_offset_minutes) * 60;
}

inline Date local_date(std::int64_t utc_ts, int utc_offset_minutes) {
  return Date{static_cast<std::int32_t>(detail::floor_div(to_local_seconds(utc_ts, utc_offset_minutes), kSecondsPerDay))};
}

// Intervention period, inclusive on both ends.
struct Period {
  std::string label;
  Date start;
  Date end;

  bool contains(Date d) const { return start <= d && d <= end; }
  int length_days() const { return end - start + 1; }
  friend bool operator==(const Period&, const Period&) = default;
};

struct Window {
  Date start;
  Date end;
  Date anchor() const { return end; }
  bool contains(Date d) const { return start <= d && d <= end; }
  friend bool operator==(const Window&, const Window&) = default;
};

}  // namespace segmob
