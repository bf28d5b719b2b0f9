#pragma once

// Restriction-impact regression, covariate / R^2 ratios and Kruskal-Wallis
// tests over matrix elements.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "segmob/common.hpp"
#include "segmob/ingest.hpp"
#include "segmob/stratify.hpp"
#include "segmob/timeline.hpp"

namespace segmob {

struct Predictor {
  std::string name;
  std::vector<double> values;
};

struct Coefficient {
  std::string name;
  std::optional<double> beta;           // empty when the column was dropped
  std::optional<double> standardized;   // beta * sd(x) / sd(y)
};

struct RegressionResult {
  std::vector<Coefficient> coefficients;  // one per predictor, input order
  double intercept = 0;
  double r2 = 0;
  double residual_variance = 0;  // SSR / (n - p - 1)
  double condition_number = 0;   // of the retained design, intercept included
  std::size_t n_obs = 0;
  std::vector<std::string> dropped;  // zero-variance predictors
  std::vector<double> residuals;

  const Coefficient& coefficient(std::string_view name) const {
    for (const auto& c : coefficients)
      if (c.name == name) return c;
    throw Error("no coefficient named '" + std::string(name) + "'");
  }
  double beta(std::string_view name) const {
    const auto& c = coefficient(name);
    if (!c.beta) throw Error("coefficient '" + std::string(name) + "' was dropped (zero variance)");
    return *c.beta;
  }
};

class RankDeficientError : public Error {
 public:
  RankDeficientError(const std::string& what, std::vector<std::string> columns)
      : Error(what), columns_(std::move(columns)) {}
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  std::vector<std::string> columns_;
};

// OLS with intercept via column-pivoted Householder QR. Constant predictors
// are dropped (reported in `dropped`); any remaining exact collinearity is an
// error naming the dependent columns.
inline RegressionResult ols_fit(std::span<const double> y, std::span<const Predictor> predictors) {
  const std::size_t n = y.size();
  if (n < predictors.size() + 2)
    throw Error("regression needs at least " + std::to_string(predictors.size() + 2) + " observations, got " +
                std::to_string(n));
  for (const auto& p : predictors)
    if (p.values.size() != n) throw Error("predictor '" + p.name + "' is not aligned with the response");

  auto mean_sd = [](std::span<const double> v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(v.size()))};
  };

  RegressionResult out;
  out.n_obs = n;
  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < predictors.size(); ++k) {
    const auto& v = predictors[k].values;
    const bool constant = std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
    if (constant) out.dropped.push_back(predictors[k].name);
    else kept.push_back(k);
  }

  const Eigen::Index p = static_cast<Eigen::Index>(kept.size()) + 1;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd Y(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    Y(row) = y[r];
    X(row, 0) = 1.0;
    for (std::size_t c = 0; c < kept.size(); ++c) X(row, static_cast<Eigen::Index>(c) + 1) = predictors[kept[c]].values[r];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    std::vector<std::string> cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < p; ++k) {
      const auto col = perm(k);
      cols.push_back(col == 0 ? std::string("intercept") : predictors[kept[static_cast<std::size_t>(col) - 1]].name);
    }
    std::string list;
    for (const auto& c : cols) list += (list.empty() ? "" : ", ") + c;
    throw RankDeficientError("rank-deficient design: linearly dependent column(s) " + list, cols);
  }
  const Eigen::VectorXd beta = qr.solve(Y);
  const Eigen::VectorXd resid = Y - X * beta;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(X);
  const auto& sv = svd.singularValues();
  out.condition_number = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();

  const auto [y_mean, y_sd] = mean_sd(y);
  const double ssr = resid.squaredNorm();
  double sst = 0;
  for (double v : y) sst += (v - y_mean) * (v - y_mean);
  out.r2 = sst > 0 ? 1.0 - ssr / sst : (ssr == 0 ? 1.0 : 0.0);
  const auto dof = static_cast<double>(n) - static_cast<double>(p);
  out.residual_variance = dof > 0 ? ssr / dof : 0.0;
  out.intercept = beta(0);
  out.residuals.assign(resid.data(), resid.data() + resid.size());

  for (const auto& pred : predictors) out.coefficients.push_back({pred.name, std::nullopt, std::nullopt});
  for (std::size_t c = 0; c < kept.size(); ++c) {
    auto& coef = out.coefficients[kept[c]];
    coef.beta = beta(static_cast<Eigen::Index>(c) + 1);
    const auto [x_mean, x_sd] = mean_sd(predictors[kept[c]].values);
    if (y_sd > 0) coef.standardized = *coef.beta * x_sd / y_sd;
  }
  return out;
}

struct DatedValue {
  Date date;
  double value = 0;
};

// Regresses a dated series on the nine restriction levels of the same day.
inline RegressionResult fit_stringency(std::span<const DatedValue> series, const StringencySeries& stringency) {
  std::vector<double> y;
  std::vector<Predictor> preds(kRestrictionCount);
  for (std::size_t k = 0; k < kRestrictionCount; ++k) preds[k].name = std::string(kRestrictionCodes[k]);
  for (const auto& obs : series) {
    const auto* rec = stringency.find(obs.date);
    if (!rec) throw Error("misaligned dates: no stringency record for " + format_date(obs.date));
    y.push_back(obs.value);
    for (std::size_t k = 0; k < kRestrictionCount; ++k) preds[k].values.push_back(rec->levels[k]);
  }
  return ols_fit(y, preds);
}

inline double covariate_ratio(const RegressionResult& fit_m, const RegressionResult& fit_s, std::string_view restriction) {
  const double num = fit_m.beta(restriction), den = fit_s.beta(restriction);
  if (den == 0) throw DegenerateError("covariate ratio undefined: zero coefficient for " + std::string(restriction));
  return num / den;
}

inline double r2_ratio(const RegressionResult& fit_m, const RegressionResult& fit_s) {
  if (!(fit_s.r2 > 0)) throw DegenerateError("R^2 ratio undefined: non-positive denominator R^2");
  return fit_m.r2 / fit_s.r2;
}

// ---------------------------------------------------------------------------
// Kruskal-Wallis

struct KruskalResult {
  double h = 0;
  int dof = 0;
  double p = 1;
  double tie_correction = 1;
  std::vector<std::size_t> sizes;
  bool degenerate = false;  // all pooled values identical
};

// Midrank ties, tie-corrected H, chi-square(k - 1) p-value.
inline KruskalResult kruskal_wallis(std::span<const std::vector<double>> groups) {
  if (groups.size() < 2) throw Error("Kruskal-Wallis needs at least two groups");
  KruskalResult out;
  out.dof = static_cast<int>(groups.size()) - 1;
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw Error("Kruskal-Wallis group " + std::to_string(g + 1) + " is empty");
    out.sizes.push_back(groups[g].size());
    for (double v : groups[g]) {
      if (!std::isfinite(v)) throw Error("Kruskal-Wallis values must be finite");
      pooled.emplace_back(v, g);
    }
  }
  const std::size_t n = pooled.size();
  if (n < 3) throw Error("Kruskal-Wallis needs at least 3 observations");
  std::sort(pooled.begin(), pooled.end());

  std::vector<double> rank_sum(groups.size(), 0.0);
  double tie_term = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && pooled[j].first == pooled[i].first) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank_sum[pooled[k].second] += midrank;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double N = static_cast<double>(n);
  out.tie_correction = 1.0 - tie_term / (N * N * N - N);
  if (out.tie_correction <= 0) {
    out.degenerate = true;
    out.h = 0;
    out.p = 1;
    return out;
  }
  double s = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) s += rank_sum[g] * rank_sum[g] / static_cast<double>(out.sizes[g]);
  const double h = 12.0 / (N * (N + 1)) * s - 3.0 * (N + 1);
  out.h = std::max(0.0, h / out.tie_correction);
  out.p = out.h > 0 ? boost::math::gamma_q(out.dof / 2.0, out.h / 2.0) : 1.0;
  return out;
}

enum class ElementSelector { all, diagonal };

inline std::vector<double> matrix_elements(int n, std::span<const double> values, ElementSelector sel) {
  std::vector<double> out;
  if (sel == ElementSelector::all) return {values.begin(), values.end()};
  for (int k = 0; k < n; ++k) out.push_back(values[static_cast<std::size_t>(k) * n + k]);
  return out;
}

inline std::vector<double> matrix_elements(const StratificationMatrix& m, ElementSelector sel) {
  return matrix_elements(m.n, m.a, sel);
}

}  // namespace segmob
