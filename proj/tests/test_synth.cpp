#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "segmob/spatial.hpp"
#include "segmob/stratify.hpp"
#include "segmob/synth.hpp"

using namespace segmob;

namespace {

synth::SynthSpec small_spec(double p, std::uint64_t seed = 7) {
  synth::SynthSpec s;
  s.n_users = 200;
  s.n_regions = 40;
  s.n_days = 10;
  s.visits_per_day = 2;
  s.p = p;
  s.seed = seed;
  s.start_date = parse_date("2020-03-02");
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST(Kernel, FullMixingAlwaysStaysInClass) {
  const synth::MixingKernel k(1.0, 10);
  synth::Rng rng(1);
  for (int t = 0; t < 5000; ++t) {
    const int own = 1 + t % 10;
    EXPECT_EQ(k.draw(own, rng), own);
  }
  EXPECT_EQ(k.probability(3, 3), 1.0);
  EXPECT_EQ(k.probability(3, 4), 0.0);
}

TEST(Kernel, ZeroMixingIsUniform) {
  const synth::MixingKernel k(0.0, 10);
  synth::Rng rng(2);
  std::vector<int> hist(11, 0);
  const int n = 200000;
  for (int t = 0; t < n; ++t) ++hist[static_cast<std::size_t>(k.draw(4, rng))];
  // chi-square with 9 dof; 0.999 quantile is 27.88
  double chi2 = 0;
  for (int c = 1; c <= 10; ++c) chi2 += std::pow(hist[static_cast<std::size_t>(c)] - n / 10.0, 2) / (n / 10.0);
  EXPECT_LT(chi2, 27.88);
}

TEST(ExpectedMatrix, AssortativityEqualsP) {
  for (double p : {0.0, 0.1, 0.3, 0.5, 0.7, 0.95}) {
    const auto e = synth::expected_matrix(p);
    for (int col = 0; col < 10; ++col) {
      double s = 0;
      for (int row = 0; row < 10; ++row) s += e.matrix.a[static_cast<std::size_t>(row) * 10 + col];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    if (p > 0) {
      EXPECT_NEAR(assortativity(e.matrix), p, 1e-12);
      EXPECT_NEAR(oracle::assortativity(10, e.matrix.mass), p, 1e-12);
    }
    EXPECT_EQ(e.r, p);
  }
  EXPECT_THROW(synth::expected_matrix(1.5), Error);
}

TEST(SampledCounts, RecoverP) {
  for (double p : {0.0, 0.3, 0.7, 1.0}) {
    const auto counts = synth::sample_class_counts(p, 200000, 10, 99);
    EXPECT_EQ(counts.total(), 200000u);
    const auto m = stratification_matrix(counts);
    EXPECT_NEAR(assortativity(m), p, 0.02) << "p=" << p;
  }
}

TEST(Spec, InfeasibleAndInvalidSpecsAreRejected) {
  auto s = small_spec(0.3);
  s.n_regions = 5;
  try {
    synth::generate_city(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("infeasible"), std::string::npos);
  }
  s = small_spec(1.2);
  EXPECT_THROW(synth::generate_city(s), Error);
  s = small_spec(0.3);
  s.visits_per_day = 0;
  EXPECT_THROW(synth::generate_city(s), Error);
}

TEST(Spec, ParsesConfigWithSchedule) {
  const auto file = parse_config(
      "n_users = 50\nn_regions = 20\np = 0.2\nseed = 5\nstart_date = 2020-01-06\nn_days = 20\n"
      "[period.A]\nstart = 2020-01-06\nend = 2020-01-15\n[period.B]\nstart = 2020-01-16\nend = 2020-01-25\np = 0.9\n");
  const auto s = synth::synth_spec_from(file);
  EXPECT_EQ(s.n_users, 50);
  ASSERT_EQ(s.schedule.size(), 2u);
  EXPECT_EQ(s.schedule[0].p, 0.2);
  EXPECT_EQ(s.schedule[1].p, 0.9);
  EXPECT_EQ(s.p_at(parse_date("2020-01-20")), 0.9);
  EXPECT_EQ(s.p_at(parse_date("2020-02-20")), 0.2);
  EXPECT_THROW(synth::synth_spec_from(parse_config("bogus = 1\n")), Error);
}

TEST(City, RegionsAreBalancedAcrossClasses) {
  const auto city = synth::generate_city(small_spec(0.3));
  std::vector<int> per_class(11, 0);
  for (int c : city.region_class) ++per_class[static_cast<std::size_t>(c)];
  for (int c = 1; c <= 10; ++c) EXPECT_EQ(per_class[static_cast<std::size_t>(c)], 4);
  // income rises with class
  for (std::size_t k = 1; k < city.regions.size(); ++k)
    EXPECT_LE(city.region_class[k - 1], city.region_class[k]);
  const auto dec = assign_deciles(city.regions);
  for (std::size_t k = 0; k < city.regions.size(); ++k)
    EXPECT_EQ(*dec.find(city.regions[k].region_id), city.region_class[k]);
}

TEST(City, FullMixingSendsDaytimeVisitsToOwnClass) {
  const auto city = synth::generate_city(small_spec(1.0));
  const auto index = build_index(city.regions);
  std::map<std::string, int> class_of_region, class_of_user;
  for (std::size_t k = 0; k < city.regions.size(); ++k) class_of_region[city.regions[k].region_id] = city.region_class[k];
  for (const auto& u : city.users) class_of_user[u.user_id] = u.user_class;
  std::size_t checked = 0;
  for (const auto& r : city.trajectories) {
    const auto region = locate_point(index, r.lon, r.lat);
    ASSERT_TRUE(region.has_value());
    EXPECT_EQ(class_of_region.at(*region), class_of_user.at(r.user_id));
    ++checked;
  }
  EXPECT_GT(checked, 1000u);
}

TEST(City, GroundTruthMatchesGeneratedHomes) {
  testutil::TempDir dir;
  const auto city = synth::generate_city(small_spec(0.5));
  const auto files = synth::write_city(city, dir.path());
  const auto truth = nlohmann::json::parse(slurp(files.truth));
  ASSERT_EQ(truth["users"].size(), 200u);
  ASSERT_EQ(truth["regions"].size(), 40u);
  std::map<std::string, int> region_class;
  for (const auto& r : truth["regions"]) region_class[r["region_id"]] = r["class"];
  for (const auto& u : truth["users"]) EXPECT_EQ(region_class.at(u["home_region"]), u["class"].get<int>());
  EXPECT_EQ(truth["seed"], 7);
  // written inputs load back
  EXPECT_EQ(load_trajectories(files.trajectories).size(), city.trajectories.size());
  EXPECT_EQ(load_ses_map(files.ses_map).size(), 40u);
  EXPECT_EQ(load_stringency(files.stringency).records.size(), 10u);
  EXPECT_NO_THROW(load_run_config(files.run_config));
}

TEST(City, SameSeedIsByteIdentical) {
  testutil::TempDir a, b, c;
  const auto fa = synth::write_city(synth::generate_city(small_spec(0.4, 11)), a.path());
  const auto fb = synth::write_city(synth::generate_city(small_spec(0.4, 11)), b.path());
  const auto fc = synth::write_city(synth::generate_city(small_spec(0.4, 12)), c.path());
  for (auto member : {&synth::CityFiles::trajectories, &synth::CityFiles::ses_map, &synth::CityFiles::stringency,
                      &synth::CityFiles::truth, &synth::CityFiles::run_config})
    EXPECT_EQ(slurp(fa.*member), slurp(fb.*member));
  EXPECT_NE(slurp(fa.trajectories), slurp(fc.trajectories));
}

TEST(Stringency, FollowsScheduleWithinLevelBounds) {
  auto s = small_spec(0.3);
  s.n_days = 60;
  s.schedule = {{{"BL", s.start_date, s.start_date + 29}, 0.3}, {{"L", s.start_date + 30, s.start_date + 59}, 0.7}};
  const auto recs = synth::generate_stringency(s);
  ASSERT_EQ(recs.size(), 60u);
  const auto c8 = restriction_index("C8");
  for (const auto& r : recs) {
    EXPECT_EQ(r.levels[c8], 1.0);
    for (std::size_t k = 0; k < kRestrictionCount; ++k) {
      EXPECT_GE(r.levels[k], 0.0);
      EXPECT_LE(r.levels[k], synth::detail::kMaxLevels[k]);
    }
  }
  EXPECT_EQ(recs.front().levels[restriction_index("C1")], 0.0);
  EXPECT_EQ(recs[50].levels[restriction_index("C1")], 3.0);
}
