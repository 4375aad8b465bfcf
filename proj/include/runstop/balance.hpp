#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/rng.hpp"
#include "runstop/svg.hpp"
#include "runstop/units.hpp"

namespace runstop {

inline double mean_of(std::span<const double> x) {
  return x.empty() ? std::nan("") : std::accumulate(x.begin(), x.end(), 0.0) / x.size();
}

inline double variance_of(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / (x.size() - 1);
}

// (mean_t - mean_c) / sqrt((s_t^2 + s_c^2) / 2). 0/0 is 0; a mean gap with
// zero spread is a signed infinity.
inline double standardized_bias(std::span<const double> treated, std::span<const double> control) {
  if (treated.empty() || control.empty()) throw DomainError("standardized bias needs two non-empty samples");
  const double diff = mean_of(treated) - mean_of(control);
  const double pooled = std::sqrt((variance_of(treated) + variance_of(control)) / 2);
  if (pooled == 0) {
    if (diff == 0) return 0;
    return diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  }
  return diff / pooled;
}

inline double ks_statistic(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) return 0;
  std::vector<double> a(x.begin(), x.end()), b(y.begin(), y.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

// Asymptotic two-sided p-value with the small-sample correction of the
// Kolmogorov limit: Q_KS((sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D).
inline double ks_asymptotic_p(double d, std::size_t n, std::size_t m) {
  if (n == 0 || m == 0) return 1.0;
  const double en = std::sqrt(static_cast<double>(n) * m / (n + m));
  const double lambda = (en + 0.12 + 0.11 / en) * d;
  if (lambda < 1e-3) return 1.0;
  double sum = 0, sign = 1;
  for (int k = 1; k <= 200; ++k) {
    const double term = sign * std::exp(-2.0 * k * k * lambda * lambda);
    sum += term;
    if (std::abs(term) < 1e-12 * std::abs(sum)) break;
    sign = -sign;
  }
  return std::clamp(2 * sum, 0.0, 1.0);
}

// Resampled KS test: each replicate splits the pooled sample at random into
// groups of the original sizes. Works on pooled ranks so each replicate is
// linear in the sample size.
inline double ks_bootstrap_test(std::span<const double> x, std::span<const double> y, int B,
                                std::uint64_t seed) {
  if (B < 100) throw ConfigError("ks bootstrap needs at least 100 replicates");
  if (x.empty() || y.empty()) return 1.0;
  const double d_obs = ks_statistic(x, y);
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::vector<double> uniq = pooled;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<std::uint32_t> rank(pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i)
    rank[i] = static_cast<std::uint32_t>(std::lower_bound(uniq.begin(), uniq.end(), pooled[i]) - uniq.begin());
  const std::size_t n = x.size(), m = y.size(), N = pooled.size(), U = uniq.size();
  Rng rng(seed);
  std::vector<int> cx(U), cy(U);
  int exceed = 0;
  const double tol = 1e-12;
  for (int b = 0; b < B; ++b) {
    std::fill(cx.begin(), cx.end(), 0);
    std::fill(cy.begin(), cy.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, N - 1);
      std::swap(rank[i], rank[pick(rng)]);
      ++cx[rank[i]];
    }
    for (std::size_t i = n; i < N; ++i) ++cy[rank[i]];
    double fx = 0, fy = 0, d = 0;
    for (std::size_t u = 0; u < U; ++u) {
      fx += cx[u];
      fy += cy[u];
      d = std::max(d, std::abs(fx / n - fy / m));
    }
    if (d >= d_obs - tol) ++exceed;
  }
  return (1.0 + exceed) / (B + 1.0);
}

inline double welch_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) return 1.0;
  const double mx = mean_of(x), my = mean_of(y);
  const double vx = variance_of(x) / x.size(), vy = variance_of(y) / y.size();
  const double se2 = vx + vy;
  if (se2 <= 0) return mx == my ? 1.0 : 0.0;
  const double t = (mx - my) / std::sqrt(se2);
  double df = se2 * se2;
  const double den = vx * vx / (x.size() - 1) + vy * vy / (y.size() - 1);
  df = den > 0 ? df / den : static_cast<double>(x.size() + y.size() - 2);
  boost::math::students_t dist(df);
  return std::clamp(2 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

inline double paired_t_test(std::span<const double> diffs) {
  if (diffs.size() < 2) return 1.0;
  const double m = mean_of(diffs), v = variance_of(diffs);
  if (v <= 0) return m == 0 ? 1.0 : 0.0;
  const double t = m / std::sqrt(v / diffs.size());
  boost::math::students_t dist(static_cast<double>(diffs.size() - 1));
  return std::clamp(2 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

struct ChiSquareResult {
  double p = 1;
  double statistic = 0;
  int df = 0;
  bool merged = false;
};

// Pearson test of group x category independence. Rare categories are merged
// (smallest first) until every expected count is at least 1.
inline ChiSquareResult chi_square_test(std::span<const std::string> a, std::span<const std::string> b) {
  ChiSquareResult r;
  std::map<std::string, std::pair<double, double>> counts;
  for (const auto& s : a) counts[s].first += 1;
  for (const auto& s : b) counts[s].second += 1;
  std::vector<std::pair<double, double>> cells;
  for (const auto& [k, c] : counts) cells.push_back(c);
  const double na = a.size(), nb = b.size(), n = na + nb;
  if (na == 0 || nb == 0) return r;
  auto min_expected = [&](const std::pair<double, double>& c) {
    return (c.first + c.second) * std::min(na, nb) / n;
  };
  auto total = [](const std::pair<double, double>& c) { return c.first + c.second; };
  std::sort(cells.begin(), cells.end(), [&](auto& u, auto& v) { return total(u) < total(v); });
  while (cells.size() > 2 && min_expected(cells.front()) < 1) {
    cells[1].first += cells[0].first;
    cells[1].second += cells[0].second;
    cells.erase(cells.begin());
    std::sort(cells.begin(), cells.end(), [&](auto& u, auto& v) { return total(u) < total(v); });
    r.merged = true;
  }
  if (cells.size() < 2) return r;
  double stat = 0;
  for (const auto& c : cells) {
    const double tot = total(c);
    const double ea = tot * na / n, eb = tot * nb / n;
    stat += (c.first - ea) * (c.first - ea) / ea + (c.second - eb) * (c.second - eb) / eb;
  }
  r.statistic = stat;
  r.df = static_cast<int>(cells.size()) - 1;
  boost::math::chi_squared dist(r.df);
  r.p = std::clamp(boost::math::cdf(boost::math::complement(dist, stat)), 0.0, 1.0);
  return r;
}

struct BhResult {
  std::vector<double> adjusted;
  std::vector<bool> rejected;
};

// Benjamini-Hochberg step-up: adjusted p_(i) = min_{j >= i} p_(j) * m / j.
inline BhResult bh_adjust(std::span<const double> p, double q = 0.05) {
  const std::size_t m = p.size();
  BhResult r{std::vector<double>(m), std::vector<bool>(m)};
  if (m == 0) return r;
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return p[i] < p[j]; });
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const std::size_t i = order[k];
    running = std::min(running, p[i] * m / (k + 1));
    r.adjusted[i] = std::min(1.0, running);
  }
  for (std::size_t i = 0; i < m; ++i) r.rejected[i] = r.adjusted[i] <= q;
  return r;
}

enum class TestKind { ks_boot, t, chi2 };

inline std::string_view to_string(TestKind k) {
  switch (k) {
    case TestKind::ks_boot: return "ks_boot";
    case TestKind::t: return "t";
    case TestKind::chi2: return "chi2";
  }
  return "";
}

// Covariates tested for balance: the numeric covariates, the propensity
// score and both team identities.
inline std::vector<std::string> balance_covariates() {
  std::vector<std::string> names(kNumericCovariates.begin(), kNumericCovariates.end());
  names.emplace_back("propensity");
  names.emplace_back("bit_team");
  names.emplace_back("opposing_team");
  return names;
}

inline TestKind balance_test_kind(std::size_t k) {
  if (k < kNumNumeric) return is_binary_covariate(k) ? TestKind::t : TestKind::ks_boot;
  if (k == kNumNumeric) return TestKind::ks_boot;
  return TestKind::chi2;
}

inline double balance_value(const Unit& u, std::size_t k) {
  if (k < kNumNumeric) return numeric_values(u.cov)[k];
  return u.propensity;
}

struct BalanceRow {
  std::string covariate;
  TestKind kind = TestKind::ks_boot;
  double bias_pre = std::nan(""), bias_post = std::nan("");
  double p_pre = std::nan(""), p_post = std::nan("");
  double p_pre_adjusted = std::nan(""), p_post_adjusted = std::nan("");
  bool rejected_pre = false, rejected_post = false;
  std::string note;
};

struct BalanceReport {
  std::vector<BalanceRow> rows;
  double q = 0.05;
  bool has_post = false;
};

struct Groups {
  std::vector<const Unit*> treated;
  std::vector<const Unit*> control;  // may repeat (matched with replacement)
};

struct BalanceOptions {
  int bootstrap = 2000;
  double q = 0.05;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
};

namespace detail {

struct GroupStat {
  double bias = std::nan(""), p = std::nan("");
  std::string note;
};

inline GroupStat group_stat(const Groups& g, std::size_t k, const BalanceOptions& opt,
                            std::uint64_t seed) {
  GroupStat s;
  const TestKind kind = balance_test_kind(k);
  if (kind == TestKind::chi2) {
    std::vector<std::string> a, b;
    const bool bit = k == kNumNumeric + 1;
    for (auto* u : g.treated) a.push_back(bit ? u->cov.bit_team : u->cov.opposing_team);
    for (auto* u : g.control) b.push_back(bit ? u->cov.bit_team : u->cov.opposing_team);
    const auto r = chi_square_test(a, b);
    s.p = r.p;
    if (r.merged) s.note = "rare categories merged";
    return s;
  }
  std::vector<double> a, b;
  for (auto* u : g.treated) a.push_back(balance_value(*u, k));
  for (auto* u : g.control) b.push_back(balance_value(*u, k));
  if (a.empty() || b.empty()) return s;
  s.bias = standardized_bias(a, b);
  if (std::isinf(s.bias)) s.note = "zero pooled spread";
  s.p = kind == TestKind::t ? welch_t_test(a, b) : ks_bootstrap_test(a, b, opt.bootstrap, seed);
  return s;
}

}  // namespace detail

// Balance before (and optionally after) matching; BH adjustment runs across
// all rows of each table separately.
inline BalanceReport group_tests(const Groups& pre, const Groups* post, const BalanceOptions& opt = {}) {
  BalanceReport rep;
  rep.q = opt.q;
  rep.has_post = post != nullptr;
  const auto names = balance_covariates();
  rep.rows.resize(names.size());
  parallel_for(names.size() * (post ? 2 : 1), opt.jobs, [&](std::size_t job) {
    const std::size_t k = job % names.size();
    const bool is_post = job >= names.size();
    const auto s = detail::group_stat(is_post ? *post : pre, k, opt,
                                      derive_seed(opt.seed, is_post ? "balance.post" : "balance.pre", k));
    auto& row = rep.rows[k];
    if (is_post) {
      row.bias_post = s.bias;
      row.p_post = s.p;
    } else {
      row.bias_pre = s.bias;
      row.p_pre = s.p;
      row.note = s.note;
    }
  });
  for (std::size_t k = 0; k < names.size(); ++k) {
    rep.rows[k].covariate = names[k];
    rep.rows[k].kind = balance_test_kind(k);
  }
  auto adjust = [&](bool is_post) {
    std::vector<double> p;
    for (const auto& r : rep.rows) p.push_back(std::isnan(is_post ? r.p_post : r.p_pre) ? 1.0 : (is_post ? r.p_post : r.p_pre));
    const auto bh = bh_adjust(p, opt.q);
    for (std::size_t k = 0; k < rep.rows.size(); ++k) {
      (is_post ? rep.rows[k].p_post_adjusted : rep.rows[k].p_pre_adjusted) = bh.adjusted[k];
      (is_post ? rep.rows[k].rejected_post : rep.rows[k].rejected_pre) = bh.rejected[k];
    }
  };
  adjust(false);
  if (post) adjust(true);
  return rep;
}

inline void write_balance_csv(std::ostream& out, const BalanceReport& rep) {
  csv::Writer w(out);
  w.row({"covariate", "bias_pre", "bias_post", "p_pre", "p_post", "test_kind", "rejected",
         "rejected_pre", "p_pre_adjusted", "p_post_adjusted", "note"});
  for (const auto& r : rep.rows)
    w.row({r.covariate, csv::fmt(r.bias_pre), csv::fmt(r.bias_post), csv::fmt(r.p_pre),
           csv::fmt(r.p_post), std::string(to_string(r.kind)), r.rejected_post ? "1" : "0",
           r.rejected_pre ? "1" : "0", csv::fmt(r.p_pre_adjusted), csv::fmt(r.p_post_adjusted),
           r.note});
}

inline std::string love_plot_svg(const BalanceReport& rep) {
  std::vector<svg::LoveRow> rows;
  for (const auto& r : rep.rows)
    if (r.kind != TestKind::chi2) rows.push_back({r.covariate, r.bias_pre, r.bias_post});
  return svg::love_plot(rows);
}

}  // namespace runstop
