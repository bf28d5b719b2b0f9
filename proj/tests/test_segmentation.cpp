#include <gtest/gtest.h>

#include <random>

#include "segmob/segmentation.hpp"

using namespace segmob;

namespace {
Period P(std::string label, const char* a, const char* b) { return {std::move(label), parse_date(a), parse_date(b)}; }
}  // namespace

TEST(Dates, CivilRoundTripAndWeekday) {
  for (int d = -800000; d <= 800000; d += 37) {
    const Date date{d};
    EXPECT_EQ(parse_date(format_date(date)), date);
  }
  EXPECT_EQ(format_date(Date{0}), "1970-01-01");
  EXPECT_EQ(weekday(parse_date("2020-01-06")), 0);  // Monday
  EXPECT_EQ(weekday(parse_date("2020-01-05")), 6);  // Sunday
  EXPECT_EQ(parse_date("2020-03-01") - parse_date("2020-02-28"), 2);
  EXPECT_THROW(parse_date("2021-02-29"), Error);
  EXPECT_THROW(parse_date("2020-13-01"), Error);
  EXPECT_THROW(parse_date("20200101"), Error);
}

TEST(Dates, LocalDateAppliesOffset) {
  const std::int64_t ts = 1577836800;  // 2020-01-01T00:00:00Z
  EXPECT_EQ(format_date(local_date(ts, 0)), "2020-01-01");
  EXPECT_EQ(format_date(local_date(ts, -300)), "2019-12-31");
  EXPECT_EQ(format_date(local_date(ts - 1, 60)), "2020-01-01");
  EXPECT_EQ(format_date(local_date(-1, 0)), "1969-12-31");
}

TEST(Segment, TwoPeriods) {
  const std::vector<Period> in{P("BL", "2020-01-01", "2020-03-15"), P("L1", "2020-03-16", "2020-05-31")};
  const auto out = segment(in);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].label, "BL");
  EXPECT_EQ(out[1].length_days(), 77);
}

TEST(Segment, Errors) {
  EXPECT_THROW(segment(std::vector<Period>{P("BL", "2020-01-01", "2020-03-20"), P("L1", "2020-03-16", "2020-05-31")}),
               Error);
  EXPECT_THROW(segment(std::vector<Period>{P("L1", "2020-03-16", "2020-05-31"), P("BL", "2020-01-01", "2020-03-15")}),
               Error);
  EXPECT_THROW(segment(std::vector<Period>{P("X", "2020-02-01", "2020-01-01")}), Error);
  EXPECT_THROW(segment(std::vector<Period>{}), Error);
}

TEST(Segment, SinglePeriodTakesEveryDay) {
  const std::vector<Period> ps{P("ALL", "2020-01-01", "2020-12-31")};
  for (Date d = parse_date("2020-01-01"); d <= parse_date("2020-12-31"); d = d + 1)
    EXPECT_EQ(period_of(ps, d), std::optional<std::size_t>(0));
  EXPECT_EQ(period_of(ps, parse_date("2021-01-01")), std::nullopt);
}

TEST(Segment, EveryDayMapsToAtMostOnePeriod) {
  const std::vector<Period> ps{P("A", "2020-01-01", "2020-01-10"), P("B", "2020-01-15", "2020-01-20"),
                               P("C", "2020-01-21", "2020-02-01")};
  for (Date d = parse_date("2019-12-25"); d <= parse_date("2020-02-10"); d = d + 1) {
    int hits = 0;
    for (const auto& p : ps) hits += p.contains(d);
    EXPECT_LE(hits, 1);
    const auto idx = period_of(ps, d);
    EXPECT_EQ(idx.has_value(), hits == 1);
    if (idx) {
      EXPECT_TRUE(ps[*idx].contains(d));
    }
  }
}

TEST(Windows, TenDaysWindowSeven) {
  const auto w = windows(parse_date("2020-01-01"), parse_date("2020-01-10"), 7, 1);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(format_date(w[0].end), "2020-01-07");
  EXPECT_EQ(format_date(w[3].end), "2020-01-10");
  EXPECT_EQ(format_date(w[0].start), "2020-01-01");
  EXPECT_EQ(w[2].anchor(), w[2].end);
}

TEST(Windows, Errors) {
  EXPECT_THROW(windows(parse_date("2020-01-01"), parse_date("2020-01-05"), 7, 1), Error);
  EXPECT_THROW(windows(parse_date("2020-01-01"), parse_date("2020-01-30"), 0, 1), Error);
  EXPECT_THROW(windows(parse_date("2020-01-01"), parse_date("2020-01-30"), 7, 0), Error);
}

TEST(Windows, SlideEqualsWindowTiles) {
  const auto w = windows(parse_date("2020-01-01"), parse_date("2020-01-28"), 7, 7);
  ASSERT_EQ(w.size(), 4u);
  for (std::size_t k = 1; k < w.size(); ++k) EXPECT_EQ(w[k].start, w[k - 1].end + 1);
}

TEST(Windows, CountFormulaProperty) {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const int range = 1 + static_cast<int>(rng() % 200);
    const int win = 1 + static_cast<int>(rng() % static_cast<unsigned>(range));
    const int slide = 1 + static_cast<int>(rng() % 20);
    const Date first{18000};
    const auto w = windows(first, first + (range - 1), win, slide);
    EXPECT_EQ(w.size(), static_cast<std::size_t>((range - win) / slide + 1));
    for (const auto& x : w) EXPECT_EQ(x.end - x.start + 1, win);
  }
}

namespace {
StringencyRecord rec(const char* d, std::array<double, 9> levels) { return {parse_date(d), levels}; }
}  // namespace

TEST(Breakpoints, Cases) {
  const std::vector<StringencyRecord> flat{rec("2020-03-20", {}), rec("2020-03-21", {}), rec("2020-03-22", {})};
  EXPECT_TRUE(suggest_breakpoints(flat, 1).empty());

  std::vector<StringencyRecord> c6{rec("2020-03-21", {}), rec("2020-03-22", {}), rec("2020-03-23", {0, 0, 0, 0, 0, 3}),
                                   rec("2020-03-24", {0, 0, 0, 0, 0, 3})};
  const auto bp = suggest_breakpoints(c6, 1);
  ASSERT_EQ(bp.size(), 1u);
  EXPECT_EQ(format_date(bp[0]), "2020-03-23");

  std::vector<StringencyRecord> two{rec("2020-03-22", {}), rec("2020-03-23", {2, 0, 0, 0, 0, 3})};
  EXPECT_EQ(suggest_breakpoints(two, 1).size(), 1u);
  EXPECT_TRUE(suggest_breakpoints(two, 4).empty());
}
