#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "runstop/balance.hpp"
#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/matching.hpp"
#include "runstop/rng.hpp"
#include "runstop/units.hpp"

namespace runstop {

struct EffectEstimate {
  double att = 0;
  double se = 0;
  double p_value = 1;
  double ci_lo = 0, ci_hi = 0;
  std::size_t n_pairs = 0;
  std::string method = "abadie_imbens";
};

inline double normal_two_sided_p(double z) {
  if (!std::isfinite(z)) return std::isnan(z) ? 1.0 : 0.0;
  boost::math::normal n;
  return std::clamp(2 * boost::math::cdf(boost::math::complement(n, std::abs(z))), 0.0, 1.0);
}

inline std::vector<double> pair_differences(std::span<const Pair> pairs, std::span<const double> y) {
  std::vector<double> d;
  d.reserve(pairs.size());
  for (const auto& p : pairs) d.push_back(y[p.treated] - y[p.control]);
  return d;
}

namespace detail {

// Conditional variance per unit from its nearest neighbour in the same arm
// under the matching metric: sigma^2 = (Y_i - Y_nn)^2 / 2. Neighbours from the
// same game are skipped: adjacent lattice points share most of their post window.
inline std::vector<double> within_arm_variance(const MatchData& d, const MatchedCohort& c,
                                               std::span<const double> y,
                                               const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd Z = d.X * c.scaling.transpose();
  for (Eigen::Index k = 0; k < Z.cols(); ++k) Z.col(k) *= std::sqrt(c.weights[k]);
  std::vector<double> out(rows.size(), 0.0);
  for (std::size_t a = 0; a < rows.size(); ++a) {
    const std::size_t i = rows[a];
    double best = INFINITY;
    std::size_t nn = i;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (j == i || d.treated[j] != d.treated[i] || (!d.groups.empty() && d.groups[j] == d.groups[i])) continue;
      const double dist = (Z.row(j) - Z.row(i)).squaredNorm();
      if (dist < best || (dist == best && d.ids[j] < d.ids[nn])) {
        best = dist;
        nn = j;
      }
    }
    if (nn != i) out[a] = 0.5 * (y[i] - y[nn]) * (y[i] - y[nn]);
  }
  return out;
}

}  // namespace detail

// ATT over matched pairs with the Abadie-Imbens variance for one-to-one
// matching with replacement:
//   V = (1/N1^2) [ sum_treated (Y_i - Y_m(i) - att)^2 + sum_controls K (K - 1) sigma^2 ]
inline EffectEstimate att(const MatchData& d, const MatchedCohort& c, std::span<const double> y) {
  if (c.pairs.empty()) throw DomainError("empty matched cohort");
  EffectEstimate e;
  const auto diffs = pair_differences(c.pairs, y);
  const double n1 = static_cast<double>(diffs.size());
  e.att = mean_of(diffs);
  e.n_pairs = diffs.size();
  double v = 0;
  for (double x : diffs) v += (x - e.att) * (x - e.att);
  std::vector<std::size_t> reused;
  std::vector<int> ks;
  for (const auto& [row, k] : c.reuse)
    if (k > 1) {
      reused.push_back(row);
      ks.push_back(k);
    }
  const auto s2 = detail::within_arm_variance(d, c, y, reused);
  for (std::size_t a = 0; a < reused.size(); ++a) v += static_cast<double>(ks[a]) * (ks[a] - 1) * s2[a];
  e.se = std::sqrt(v) / n1;
  e.p_value = e.se > 0 ? normal_two_sided_p(e.att / e.se) : (e.att == 0 ? 1.0 : 0.0);
  e.ci_lo = e.att - 1.959963984540054 * e.se;
  e.ci_hi = e.att + 1.959963984540054 * e.se;
  return e;
}

inline double naive_diff(std::span<const Unit> units) {
  std::vector<double> a, b;
  for (const auto& u : units) (u.treated ? a : b).push_back(u.outcome);
  if (a.empty() || b.empty()) throw DomainError("naive difference needs both groups");
  return mean_of(a) - mean_of(b);
}

// Two-sided sign-flip test of the mean pair difference. Exact for n <= 20,
// otherwise B Monte Carlo flips with add-one smoothing.
inline double paired_permutation_test(std::span<const double> diffs, int B = 100000,
                                      std::uint64_t seed = 1, int exact_max = 20) {
  const std::size_t n = diffs.size();
  if (n == 0) return 1.0;
  const double total = std::accumulate(diffs.begin(), diffs.end(), 0.0);
  const double t_obs = std::abs(total);
  double scale = 0;
  for (double x : diffs) scale = std::max(scale, std::abs(x));
  const double tol = 1e-9 * std::max(scale * n, 1e-300);
  if (static_cast<int>(n) <= exact_max) {
    // Gray-code walk over all sign patterns, one flip per step.
    std::vector<int> sign(n, 1);
    double sum = total;
    std::uint64_t hits = 0;
    const std::uint64_t patterns = std::uint64_t{1} << n;
    for (std::uint64_t k = 0; k < patterns; ++k) {
      if (k > 0) {
        const int bit = __builtin_ctzll(k);
        sum -= 2.0 * sign[bit] * diffs[bit];
        sign[bit] = -sign[bit];
      }
      if (std::abs(sum) >= t_obs - tol) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(patterns);
  }
  Rng rng(seed);
  std::uint64_t hits = 0;
  for (int b = 0; b < B; ++b) {
    double sum = 0;
    std::uint64_t bits = 0;
    int left = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (left == 0) {
        bits = rng();
        left = 64;
      }
      sum += (bits & 1) ? diffs[i] : -diffs[i];
      bits >>= 1;
      --left;
    }
    if (std::abs(sum) >= t_obs - tol) ++hits;
  }
  return (1.0 + hits) / (B + 1.0);
}

struct FranchiseEffect {
  std::string franchise;
  double att = 0;
  double ci_lo = 0, ci_hi = 0;
  double p_raw = 1, p_adjusted = 1;
  std::size_t n_treated = 0;
  bool rejected = false;
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double f = pos - i;
  return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
}

struct FranchiseOptions {
  int bootstrap = 10000;
  int permutations = 100000;
  double q = 0.05;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
};

// Per-franchise mean pair difference, grouped by the BiT franchise of the
// treated unit, with pair-bootstrap percentile CIs and BH-adjusted sign-flip
// p-values.
inline std::vector<FranchiseEffect> franchise_effects(std::span<const Unit> units,
                                                      std::span<const Pair> pairs,
                                                      const FranchiseOptions& opt = {}) {
  std::map<std::string, std::vector<double>> groups;
  for (const auto& p : pairs)
    groups[units[p.treated].cov.bit_team].push_back(units[p.treated].outcome - units[p.control].outcome);
  std::vector<FranchiseEffect> out;
  std::vector<const std::vector<double>*> diffs;
  for (const auto& [name, d] : groups) {
    FranchiseEffect f;
    f.franchise = name;
    f.n_treated = d.size();
    f.att = mean_of(d);
    out.push_back(f);
    diffs.push_back(&d);
  }
  parallel_for(out.size(), opt.jobs, [&](std::size_t k) {
    const auto& d = *diffs[k];
    Rng rng = make_rng(opt.seed, "franchise.bootstrap", k);
    std::uniform_int_distribution<std::size_t> pick(0, d.size() - 1);
    std::vector<double> boots(opt.bootstrap);
    for (auto& b : boots) {
      double s = 0;
      for (std::size_t i = 0; i < d.size(); ++i) s += d[pick(rng)];
      b = s / d.size();
    }
    out[k].ci_lo = percentile(boots, 0.025);
    out[k].ci_hi = percentile(boots, 0.975);
    out[k].p_raw = paired_permutation_test(d, opt.permutations, derive_seed(opt.seed, "franchise.perm", k));
  });
  std::vector<double> p;
  for (const auto& f : out) p.push_back(f.p_raw);
  const auto bh = bh_adjust(p, opt.q);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].p_adjusted = bh.adjusted[k];
    out[k].rejected = bh.rejected[k];
  }
  return out;
}

inline void write_franchise_csv(std::ostream& out, std::span<const FranchiseEffect> fx) {
  csv::Writer w(out);
  w.row({"franchise", "estimate", "lo", "hi", "p_raw", "p_adjusted", "n_treated"});
  for (const auto& f : fx)
    w.row({f.franchise, csv::fmt(f.att), csv::fmt(f.ci_lo), csv::fmt(f.ci_hi), csv::fmt(f.p_raw),
           csv::fmt(f.p_adjusted), csv::fmt(f.n_treated)});
}

inline nlohmann::json franchise_json(std::span<const FranchiseEffect> fx) {
  auto a = nlohmann::json::array();
  for (const auto& f : fx)
    a.push_back({{"franchise", f.franchise}, {"att", f.att}, {"ci", {f.ci_lo, f.ci_hi}},
                 {"p_raw", f.p_raw}, {"p_adjusted", f.p_adjusted}, {"n_treated", f.n_treated}});
  return a;
}

}  // namespace runstop
