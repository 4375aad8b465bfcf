#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"

namespace runstop {

struct SignedRank {
  std::vector<int> ranks2;  // twice the average rank of |d|, zeros dropped
  std::vector<bool> positive;
  long long t2 = 0;  // twice the signed-rank statistic (sum of positive ranks)
};

inline SignedRank signed_rank(std::span<const double> diffs, double shift = 0) {
  std::vector<std::pair<double, bool>> v;
  for (double d : diffs) {
    const double x = d - shift;
    if (x != 0) v.emplace_back(std::abs(x), x > 0);
  }
  std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first < b.first; });
  SignedRank s;
  s.ranks2.resize(v.size());
  s.positive.resize(v.size());
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const int r2 = static_cast<int>(i + 1 + j);  // (first + last) rank, 1-based
    for (std::size_t k = i; k < j; ++k) {
      s.ranks2[k] = r2;
      s.positive[k] = v[k].second;
      if (v[k].second) s.t2 += r2;
    }
    i = j;
  }
  return s;
}

// Tail probabilities of the signed-rank statistic when each pair is positive
// independently with probability q: returns {Pr(T >= t), Pr(T <= t)}.
// Exact by convolution for n <= exact_max, normal approximation beyond.
inline std::pair<double, double> signed_rank_tails(const SignedRank& s, double q, int exact_max = 50) {
  const std::size_t n = s.ranks2.size();
  if (n == 0) return {1.0, 1.0};
  if (static_cast<int>(n) <= exact_max) {
    long long total = 0;
    for (int r : s.ranks2) total += r;
    std::vector<double> dist(total + 1, 0.0);
    dist[0] = 1.0;
    long long reach = 0;
    for (int r : s.ranks2) {
      for (long long v = reach; v >= 0; --v) {
        if (dist[v] == 0) continue;
        dist[v + r] += dist[v] * q;
        dist[v] *= 1 - q;
      }
      reach += r;
    }
    double upper = 0, lower = 0;
    for (long long v = 0; v <= total; ++v) {
      if (v >= s.t2) upper += dist[v];
      if (v <= s.t2) lower += dist[v];
    }
    return {std::min(1.0, upper), std::min(1.0, lower)};
  }
  double mean = 0, var = 0;
  for (int r : s.ranks2) {
    mean += q * r;
    var += q * (1 - q) * static_cast<double>(r) * r;
  }
  const double z = (static_cast<double>(s.t2) - mean) / std::sqrt(var);
  boost::math::normal nd;
  return {boost::math::cdf(boost::math::complement(nd, z)), boost::math::cdf(nd, z)};
}

inline double expected_signed_rank2(const SignedRank& s, double q) {
  double m = 0;
  for (int r : s.ranks2) m += q * r;
  return m;
}

struct SensitivityPoint {
  double gamma = 1;
  double pe_lo = 0, pe_hi = 0;
  double ci_lo = 0, ci_hi = 0;
};

namespace detail {

// Boundary of a monotone predicate on [lo, hi]: the point where pred flips
// from false (below) to true (above).
template <class Pred>
double bisect(double lo, double hi, Pred pred) {
  for (int it = 0; it < 200 && hi - lo > 1e-12 * (1 + std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (pred(mid) ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Worst-case Rosenbaum bounds for the signed-rank test at sensitivity gamma:
// p+ = gamma / (1 + gamma) and p- = 1 / (1 + gamma). The point band inverts
// T(tau) = E[T], the CI band inverts the one-sided tests at alpha / 2 each.
inline SensitivityPoint rosenbaum_bounds(std::span<const double> diffs, double gamma,
                                         double alpha = 0.05, int exact_max = 50) {
  if (!(gamma >= 1)) throw DomainError("gamma must be at least 1");
  if (diffs.size() < 2) throw DomainError("sensitivity bounds need at least two pairs");
  const double p_plus = gamma / (1 + gamma), p_minus = 1 / (1 + gamma);
  const auto [mn, mx] = std::minmax_element(diffs.begin(), diffs.end());
  const double span = *mx - *mn + 1;
  const double lo = *mn - span, hi = *mx + span;
  SensitivityPoint sp;
  sp.gamma = gamma;
  auto t_minus_e = [&](double tau, double q) {
    const auto s = signed_rank(diffs, tau);
    return static_cast<double>(s.t2) - expected_signed_rank2(s, q);
  };
  auto point = [&](double q) {
    const double a = detail::bisect(lo, hi, [&](double t) { return t_minus_e(t, q) <= 0; });
    const double b = detail::bisect(lo, hi, [&](double t) { return t_minus_e(t, q) < 0; });
    return 0.5 * (a + b);
  };
  sp.pe_lo = point(p_plus);
  sp.pe_hi = point(p_minus);
  const double a2 = alpha / 2;
  auto upper_p = [&](double tau) { return signed_rank_tails(signed_rank(diffs, tau), p_plus, exact_max).first; };
  auto lower_p = [&](double tau) { return signed_rank_tails(signed_rank(diffs, tau), p_minus, exact_max).second; };
  sp.ci_lo = upper_p(lo) > a2 ? -std::numeric_limits<double>::infinity()
                              : detail::bisect(lo, hi, [&](double t) { return upper_p(t) > a2; });
  sp.ci_hi = lower_p(hi) > a2 ? std::numeric_limits<double>::infinity()
                              : detail::bisect(lo, hi, [&](double t) { return !(lower_p(t) > a2); });
  return sp;
}

// Whether the gamma-level confidence set contains tau = 0.
inline bool ci_contains_zero(std::span<const double> diffs, double gamma, double alpha = 0.05,
                             int exact_max = 50) {
  const auto s = signed_rank(diffs, 0.0);
  const double p_plus = gamma / (1 + gamma), p_minus = 1 / (1 + gamma);
  return signed_rank_tails(s, p_plus, exact_max).first > alpha / 2 &&
         signed_rank_tails(s, p_minus, exact_max).second > alpha / 2;
}

struct GammaStar {
  double gamma = 1;
  bool already_contains_zero = false;
  bool hit_cap = false;
};

// Smallest grid gamma (1 + k * step) whose confidence set contains 0. The
// confidence set only widens with gamma, so the grid is searched by bisection.
inline GammaStar gamma_star(std::span<const double> diffs, double step = 0.01, double cap = 20.0,
                            double alpha = 0.05, int exact_max = 50) {
  GammaStar g;
  if (ci_contains_zero(diffs, 1.0, alpha, exact_max)) {
    g.already_contains_zero = true;
    return g;
  }
  const long long kmax = static_cast<long long>(std::llround((cap - 1) / step));
  if (!ci_contains_zero(diffs, 1 + kmax * step, alpha, exact_max)) {
    g.gamma = 1 + kmax * step;
    g.hit_cap = true;
    return g;
  }
  long long lo = 0, hi = kmax;  // lo excludes zero, hi contains it
  while (hi - lo > 1) {
    const long long mid = (lo + hi) / 2;
    (ci_contains_zero(diffs, 1 + mid * step, alpha, exact_max) ? hi : lo) = mid;
  }
  g.gamma = 1 + hi * step;
  return g;
}

inline std::vector<SensitivityPoint> sensitivity_curve(std::span<const double> diffs,
                                                       std::span<const double> gammas,
                                                       double alpha = 0.05) {
  std::vector<SensitivityPoint> out;
  for (double g : gammas) out.push_back(rosenbaum_bounds(diffs, g, alpha));
  return out;
}

inline void write_sensitivity_csv(std::ostream& out, std::span<const SensitivityPoint> pts) {
  csv::Writer w(out);
  w.row({"gamma", "pe_lo", "pe_hi", "ci_lo", "ci_hi"});
  for (const auto& p : pts)
    w.row({csv::fmt(p.gamma), csv::fmt(p.pe_lo), csv::fmt(p.pe_hi), csv::fmt(p.ci_lo), csv::fmt(p.ci_hi)});
}

}  // namespace runstop
