#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "segmob/stats.hpp"

using namespace segmob;

namespace {

std::vector<Predictor> nine_columns(std::size_t n, std::mt19937_64& rng, bool constant_rest = false) {
  std::vector<Predictor> preds;
  for (auto code : kRestrictionCodes) preds.push_back({std::string(code), {}});
  std::uniform_int_distribution<int> lvl(0, 4);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < preds.size(); ++k)
      preds[k].values.push_back(constant_rest && k > 0 ? 2.0 : static_cast<double>(lvl(rng)));
  return preds;
}

RegressionResult fit_with(const std::vector<std::pair<std::string, double>>& betas, double r2) {
  RegressionResult r;
  for (const auto& [name, b] : betas) r.coefficients.push_back({name, b, std::nullopt});
  r.r2 = r2;
  return r;
}

}  // namespace

TEST(Ols, ExactFitWithDroppedColumns) {
  std::mt19937_64 rng(1);
  const auto preds = nine_columns(30, rng, true);
  std::vector<double> y;
  for (double c1 : preds[0].values) y.push_back(2 * c1 + 1);
  const auto fit = ols_fit(y, preds);
  EXPECT_NEAR(fit.beta("C1"), 2.0, 1e-10);
  EXPECT_NEAR(fit.intercept, 1.0, 1e-10);
  EXPECT_NEAR(fit.r2, 1.0, 1e-10);
  EXPECT_EQ(fit.dropped.size(), 8u);
  EXPECT_FALSE(fit.coefficient("C2").beta.has_value());
  EXPECT_THROW(fit.beta("C2"), Error);
  EXPECT_THROW(fit.coefficient("Z9"), Error);
}

TEST(Ols, NoiseGivesSmallR2) {
  std::mt19937_64 rng(2);
  const auto preds = nine_columns(1000, rng);
  std::normal_distribution<double> noise(0, 1);
  std::vector<double> y(1000);
  for (auto& v : y) v = noise(rng);
  EXPECT_LT(std::abs(ols_fit(y, preds).r2), 0.05);
}

TEST(Ols, DuplicatedColumnIsRankDeficient) {
  std::mt19937_64 rng(3);
  auto preds = nine_columns(50, rng);
  preds[4].values = preds[2].values;
  std::vector<double> y(50, 0.0);
  for (std::size_t r = 0; r < 50; ++r) y[r] = preds[0].values[r] + 0.1 * static_cast<double>(r % 3);
  try {
    ols_fit(y, preds);
    FAIL();
  } catch (const RankDeficientError& e) {
    ASSERT_EQ(e.columns().size(), 1u);
    EXPECT_TRUE(e.columns()[0] == "C3" || e.columns()[0] == "C5");
  }
  // a linear combination of two columns too
  preds = nine_columns(50, rng);
  for (std::size_t r = 0; r < 50; ++r) preds[8].values[r] = preds[0].values[r] - 2 * preds[1].values[r];
  EXPECT_THROW(ols_fit(y, preds), RankDeficientError);
}

TEST(Ols, PreconditionErrors) {
  std::mt19937_64 rng(4);
  const auto preds = nine_columns(10, rng);
  EXPECT_THROW(ols_fit(std::vector<double>(10, 1.0), preds), Error);  // needs >= 11
  auto short_pred = nine_columns(20, rng);
  short_pred[3].values.pop_back();
  EXPECT_THROW(ols_fit(std::vector<double>(20, 1.0), short_pred), Error);
}

TEST(Ols, MatchesNormalEquationsAndResidualsOrthogonal) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 40 + rng() % 200;
    std::vector<Predictor> preds(4);
    std::vector<std::vector<double>> cols(4);
    for (std::size_t k = 0; k < 4; ++k) {
      preds[k].name = "x" + std::to_string(k);
      for (std::size_t r = 0; r < n; ++r) preds[k].values.push_back(g(rng));
      cols[k] = preds[k].values;
    }
    std::vector<double> y;
    for (std::size_t r = 0; r < n; ++r)
      y.push_back(0.5 + 1.5 * cols[0][r] - 2 * cols[1][r] + 0.25 * cols[3][r] + g(rng));
    const auto fit = ols_fit(y, preds);
    const auto ref = oracle::ols_normal(y, cols);
    EXPECT_NEAR(fit.intercept, ref[0], 1e-9);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(fit.beta(preds[k].name), ref[k + 1], 1e-9);
    EXPECT_NEAR(fit.r2, oracle::r_squared(y, cols, ref), 1e-8);
    double dot0 = 0;
    for (double e : fit.residuals) dot0 += e;
    EXPECT_LT(std::abs(dot0), 1e-8);
    for (const auto& c : cols) {
      double dot = 0;
      for (std::size_t r = 0; r < n; ++r) dot += fit.residuals[r] * c[r];
      EXPECT_LT(std::abs(dot), 1e-8);
    }
    EXPECT_GE(fit.condition_number, 1.0);
  }
}

TEST(Ols, InvariantToRowOrder) {
  std::mt19937_64 rng(6);
  const auto preds = nine_columns(80, rng);
  std::vector<double> y;
  std::normal_distribution<double> g(0, 1);
  for (std::size_t r = 0; r < 80; ++r) y.push_back(preds[0].values[r] - preds[5].values[r] + g(rng));
  const auto fit = ols_fit(y, preds);
  std::vector<std::size_t> perm(80);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto p2 = preds;
  std::vector<double> y2(80);
  for (std::size_t r = 0; r < 80; ++r) {
    y2[r] = y[perm[r]];
    for (std::size_t k = 0; k < preds.size(); ++k) p2[k].values[r] = preds[k].values[perm[r]];
  }
  const auto fit2 = ols_fit(y2, p2);
  for (const auto& c : fit.coefficients) EXPECT_NEAR(*c.beta, fit2.beta(c.name), 1e-10);
  EXPECT_NEAR(fit.r2, fit2.r2, 1e-12);
}

TEST(Ols, StandardizedBetas) {
  std::mt19937_64 rng(7);
  auto preds = nine_columns(60, rng, true);
  std::vector<double> y;
  for (double v : preds[0].values) y.push_back(3 * v);
  const auto fit = ols_fit(y, preds);
  EXPECT_NEAR(*fit.coefficient("C1").standardized, 1.0, 1e-10);
}

TEST(FitStringency, AlignsByDateAndRejectsMissing) {
  StringencySeries s;
  const Date d0 = parse_date("2020-03-01");
  std::vector<DatedValue> series;
  for (int d = 0; d < 20; ++d) {
    StringencyRecord rec{d0 + d, {}};
    rec.levels[0] = d % 4;
    rec.levels[8] = (d / 3) % 3;
    s.records.push_back(rec);
    series.push_back({d0 + d, 1 + 0.5 * rec.levels[0] - 0.25 * rec.levels[8]});
  }
  std::reverse(series.begin(), series.end());
  const auto fit = fit_stringency(series, s);
  EXPECT_NEAR(fit.beta("C1"), 0.5, 1e-10);
  EXPECT_NEAR(fit.beta("H1"), -0.25, 1e-10);
  EXPECT_EQ(fit.dropped.size(), 7u);
  series.push_back({d0 + 40, 1.0});
  try {
    fit_stringency(series, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("misaligned"), std::string::npos);
  }
}

TEST(Ratios, CovariateRatio) {
  const auto fm = fit_with({{"H1", 3.33 * 0.12}, {"C1", 0.5}}, 0.6);
  const auto fs = fit_with({{"H1", 0.12}, {"C1", 0.0}}, 0.4);
  EXPECT_NEAR(covariate_ratio(fm, fs, "H1"), 3.33, 1e-12);
  EXPECT_NEAR(covariate_ratio(fm, fm, "C1"), 1.0, 1e-15);
  EXPECT_THROW(covariate_ratio(fm, fs, "C1"), DegenerateError);
}

TEST(Ratios, R2Ratio) {
  EXPECT_NEAR(r2_ratio(fit_with({}, 0.70), fit_with({}, 0.40)), 1.75, 1e-12);
  EXPECT_NEAR(r2_ratio(fit_with({}, 0.3), fit_with({}, 0.3)), 1.0, 1e-15);
  EXPECT_THROW(r2_ratio(fit_with({}, 0.3), fit_with({}, 0.0)), DegenerateError);
  EXPECT_THROW(r2_ratio(fit_with({}, 0.3), fit_with({}, -0.1)), DegenerateError);
}

TEST(Kruskal, HandExample) {
  const std::vector<std::vector<double>> g{{1, 2, 3}, {4, 5, 6}};
  const auto r = kruskal_wallis(g);
  EXPECT_NEAR(r.h, 3.857, 1e-3);
  EXPECT_NEAR(r.h, 27.0 / 7.0, 1e-12);
  EXPECT_NEAR(r.p, 0.0495, 1e-3);
  EXPECT_EQ(r.dof, 1);
  EXPECT_EQ(r.tie_correction, 1.0);
  EXPECT_EQ(r.sizes, (std::vector<std::size_t>{3, 3}));
}

TEST(Kruskal, IdenticalGroups) {
  const std::vector<std::vector<double>> g{{1, 2, 3}, {1, 2, 3}};
  const auto r = kruskal_wallis(g);
  EXPECT_NEAR(r.h, 0.0, 1e-12);
  EXPECT_NEAR(r.p, 1.0, 1e-12);
  const std::vector<std::vector<double>> same{{5, 5}, {5, 5, 5}};
  const auto d = kruskal_wallis(same);
  EXPECT_TRUE(d.degenerate);
  EXPECT_EQ(d.h, 0.0);
  EXPECT_EQ(d.p, 1.0);
}

TEST(Kruskal, TiesMatchBruteForceOracle) {
  const std::vector<std::vector<double>> g{{1, 1, 2}, {1, 2, 2}};
  const auto r = kruskal_wallis(g);
  EXPECT_LT(r.tie_correction, 1.0);
  EXPECT_NEAR(r.h, oracle::kruskal_h(g), 1e-12);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 4);
    std::vector<std::vector<double>> groups(static_cast<std::size_t>(k));
    for (auto& grp : groups) {
      const int n = 1 + static_cast<int>(rng() % 15);
      for (int i = 0; i < n; ++i) grp.push_back(static_cast<double>(rng() % 8));
    }
    std::size_t total = 0;
    for (auto& grp : groups) total += grp.size();
    if (total < 3) continue;
    const auto res = kruskal_wallis(groups);
    if (res.degenerate) continue;
    EXPECT_NEAR(res.h, oracle::kruskal_h(groups), 1e-9);
    EXPECT_GE(res.h, 0.0);
    EXPECT_GE(res.p, 0.0);
    EXPECT_LE(res.p, 1.0);
    EXPECT_EQ(res.dof, k - 1);
  }
}

TEST(Kruskal, MonotoneTransformInvariance) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> g(2);
  for (int i = 0; i < 100; ++i) g[0].push_back(std::round(u(rng) * 40) / 40);
  for (int i = 0; i < 100; ++i) g[1].push_back(std::round(u(rng) * u(rng) * 40) / 40);
  const auto base = kruskal_wallis(g);
  for (int t = 0; t < 100; ++t) {
    const double a = 0.1 + u(rng) * 5, b = u(rng) * 10 - 5, e = 0.5 + u(rng) * 2;
    auto h = g;
    for (auto& grp : h)
      for (auto& v : grp) v = a * std::pow(v + 0.01, e) + b;
    const auto r = kruskal_wallis(h);
    EXPECT_NEAR(r.h, base.h, 1e-9);
    EXPECT_NEAR(r.p, base.p, 1e-9);
  }
}

TEST(Kruskal, Errors) {
  EXPECT_THROW(kruskal_wallis(std::vector<std::vector<double>>{{1, 2, 3}}), Error);
  EXPECT_THROW(kruskal_wallis(std::vector<std::vector<double>>{{1}, {}}), Error);
  EXPECT_THROW(kruskal_wallis(std::vector<std::vector<double>>{{1}, {2}}), Error);
}

TEST(Selectors, AllAndDiagonal) {
  std::vector<double> m(100);
  std::iota(m.begin(), m.end(), 0.0);
  EXPECT_EQ(matrix_elements(10, m, ElementSelector::all).size(), 100u);
  const auto d = matrix_elements(10, m, ElementSelector::diagonal);
  ASSERT_EQ(d.size(), 10u);
  EXPECT_EQ(d[3], 33.0);
}
