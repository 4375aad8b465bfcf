#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "runstop/balance.hpp"
#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/rng.hpp"
#include "runstop/units.hpp"

namespace runstop {

struct MatchConfig {
  int population_size = 200;
  int wait_generations = 4;
  int max_generations = 40;
  double distance_tolerance = 1e-5;
  std::uint64_t seed = 1;
  double weight_lo = 1e-3;
  double weight_hi = 1e3;
  double time_budget_seconds = 0;  // 0: unlimited
  unsigned jobs = 1;

  void validate() const {
    if (population_size < 2) throw ConfigError("match.population must be at least 2");
    if (!(distance_tolerance > 0)) throw ConfigError("match.tolerance must be positive");
    if (!(weight_lo > 0) || !(weight_hi >= weight_lo)) throw ConfigError("match weight bounds invalid");
    if (wait_generations < 1 || max_generations < 1) throw ConfigError("match generation limits must be positive");
  }

  static MatchConfig desk() { return {}; }
  static MatchConfig paper() {
    MatchConfig c;
    c.population_size = 8000;
    c.wait_generations = 4;
    c.max_generations = 100;
    return c;
  }
};

// Matching features: one row per unit, one column per balanced covariate.
struct MatchData {
  Eigen::MatrixXd X;
  std::vector<bool> treated;
  std::vector<int> ids;
  std::vector<int> groups;  // game index per row; empty means every row stands alone
  std::vector<bool> binary;  // per column: paired t-test instead of KS in fitness
  std::vector<std::string> names;

  std::size_t size() const { return treated.size(); }
};

// Numeric covariates plus the propensity score (probability scale).
inline MatchData match_data(std::span<const Unit> units) {
  MatchData d;
  const std::size_t p = kNumNumeric + 1;
  std::map<std::string, int> game_index;
  d.X.resize(units.size(), p);
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto v = numeric_values(units[i].cov);
    for (std::size_t k = 0; k < kNumNumeric; ++k) d.X(i, k) = v[k];
    d.X(i, kNumNumeric) = units[i].propensity;
    d.treated.push_back(units[i].treated);
    d.ids.push_back(units[i].unit_id);
    d.groups.push_back(game_index.emplace(units[i].game_id, static_cast<int>(game_index.size())).first->second);
  }
  for (std::size_t k = 0; k < kNumNumeric; ++k) {
    d.binary.push_back(is_binary_covariate(k));
    d.names.emplace_back(kNumericCovariates[k]);
  }
  d.binary.push_back(false);
  d.names.emplace_back("propensity");
  if (!d.X.allFinite()) throw DomainError("matching covariates contain missing values (fit the propensity model first)");
  return d;
}

struct Scaling {
  Eigen::MatrixXd S;  // inverse Cholesky factor: S Σ S' = I
  bool ridged = false;
};

// S = L^{-1} with Σ = L L'. Unlike the symmetric inverse square root this is
// equivariant under per-column rescaling, so pairings do not depend on units
// of measurement. Singular Σ gets a relative diagonal ridge.
inline Scaling compute_scaling(const Eigen::MatrixXd& X) {
  const Eigen::Index p = X.cols();
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mean;
  Eigen::MatrixXd cov = C.transpose() * C / std::max<double>(1.0, static_cast<double>(X.rows() - 1));
  for (Eigen::Index k = 0; k < p; ++k) {
    if (!(cov(k, k) > 0)) {
      cov.row(k).setZero();
      cov.col(k).setZero();
      cov(k, k) = 1.0;
    }
  }
  Scaling s;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const double min_pivot = 1e-10;
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Eigen::MatrixXd L = llt.matrixL();
    for (Eigen::Index k = 0; k < p; ++k)
      if (L(k, k) * L(k, k) < min_pivot * cov(k, k)) ok = false;
  }
  if (!ok) {
    s.ridged = true;
    Eigen::MatrixXd reg = cov;
    for (Eigen::Index k = 0; k < p; ++k) reg(k, k) += 1e-8 * cov(k, k);
    llt.compute(reg);
    if (llt.info() != Eigen::Success) throw DomainError("covariance is not positive semi-definite");
  }
  const Eigen::MatrixXd L = llt.matrixL();
  s.S = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(p, p));
  return s;
}

inline double gmd(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, const Eigen::VectorXd& w,
                  const Eigen::MatrixXd& scaling) {
  const Eigen::VectorXd z = scaling * (xi - xj);
  return std::sqrt(std::max(0.0, (z.array().square() * w.array()).sum()));
}

struct Pair {
  std::size_t treated;  // row in MatchData
  std::size_t control;
  double distance;
};

struct MatchedCohort {
  std::vector<Pair> pairs;
  Eigen::VectorXd weights;
  Eigen::MatrixXd scaling;
  bool ridged = false;
  std::map<std::size_t, int> reuse;  // control row -> K
  std::vector<double> fitness;
  std::uint64_t seed = 0;
  bool budget_exceeded = false;
  int generations = 0;
  struct TraceRow {
    int generation;
    double best_min_p;
    double mean_min_p;
    std::vector<double> best_weights;
  };
  std::vector<TraceRow> trace;

  std::size_t unique_controls() const { return reuse.size(); }
};

namespace detail {

inline Eigen::MatrixXd whiten(const MatchData& d, const Eigen::MatrixXd& S) {
  return d.X * S.transpose();  // row i = (S x_i)'
}

inline std::vector<Pair> nearest_controls(const MatchData& d, const Eigen::MatrixXd& Z,
                                          const Eigen::VectorXd& w, double tol) {
  std::vector<std::size_t> tr, co;
  for (std::size_t i = 0; i < d.size(); ++i) (d.treated[i] ? tr : co).push_back(i);
  if (co.empty()) throw DomainError("empty control pool");
  const Eigen::Index p = Z.cols();
  // Weighted coordinates make each distance a plain squared norm.
  Eigen::MatrixXd Zw = Z;
  for (Eigen::Index k = 0; k < p; ++k) Zw.col(k) *= std::sqrt(w[k]);
  Eigen::MatrixXd C(p, co.size());
  for (std::size_t j = 0; j < co.size(); ++j) C.col(j) = Zw.row(co[j]).transpose();
  std::vector<Pair> pairs;
  pairs.reserve(tr.size());
  std::vector<double> dist(co.size());
  for (std::size_t i : tr) {
    const Eigen::VectorXd zi = Zw.row(i).transpose();
    double best = INFINITY;
    for (std::size_t j = 0; j < co.size(); ++j) {
      dist[j] = (C.col(j) - zi).squaredNorm();
      best = std::min(best, dist[j]);
    }
    const double best_d = std::sqrt(best);
    std::size_t pick = co.size();
    for (std::size_t j = 0; j < co.size(); ++j) {
      if (std::sqrt(dist[j]) - best_d > tol) continue;
      if (pick == co.size() || d.ids[co[j]] < d.ids[co[pick]]) pick = j;
    }
    pairs.push_back({i, co[pick], std::sqrt(dist[pick])});
  }
  return pairs;
}

}  // namespace detail

inline MatchedCohort match_with_weights(const MatchData& d, const Eigen::VectorXd& w,
                                        const Scaling& scaling, double tol = 1e-5) {
  MatchedCohort c;
  c.weights = w;
  c.scaling = scaling.S;
  c.ridged = scaling.ridged;
  c.pairs = detail::nearest_controls(d, detail::whiten(d, scaling.S), w, tol);
  for (const auto& p : c.pairs) c.reuse[p.control]++;
  return c;
}

inline MatchedCohort match_with_weights(const MatchData& d, const Eigen::VectorXd& w, double tol = 1e-5) {
  return match_with_weights(d, w, compute_scaling(d.X), tol);
}

// Matched-pair balance p-values over every column, sorted ascending: paired
// t-test for binary columns, KS (asymptotic) between treated and matched
// control samples otherwise.
inline std::vector<double> fitness(const MatchData& d, std::span<const Pair> pairs) {
  std::vector<double> p;
  const auto n = pairs.size();
  std::vector<double> a(n), b(n), diff(n);
  for (Eigen::Index k = 0; k < d.X.cols(); ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = d.X(pairs[i].treated, k);
      b[i] = d.X(pairs[i].control, k);
      diff[i] = a[i] - b[i];
    }
    if (d.binary[k]) p.push_back(paired_t_test(diff));
    else p.push_back(ks_asymptotic_p(ks_statistic(a, b), n, n));
  }
  std::sort(p.begin(), p.end());
  return p;
}

// Lexicographic order on sorted p-value vectors: true if a balances better.
inline bool fitter(const std::vector<double>& a, const std::vector<double>& b) {
  return std::lexicographical_compare(b.begin(), b.end(), a.begin(), a.end());
}

inline MatchedCohort genetic_search(const MatchData& d, const MatchConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const Scaling scaling = compute_scaling(d.X);
  const Eigen::MatrixXd Z = detail::whiten(d, scaling.S);
  const Eigen::Index p = d.X.cols();
  const double glo = std::log(cfg.weight_lo), ghi = std::log(cfg.weight_hi);
  const int pop = cfg.population_size;
  const int n_elite = std::max(1, static_cast<int>(std::ceil(0.1 * pop)));

  struct Individual {
    Eigen::VectorXd genes;  // log weights
    std::vector<double> fit;
    bool evaluated = false;
  };
  auto clampg = [&](double g) { return std::clamp(g, glo, ghi); };
  std::vector<Individual> popn(pop);
  for (int i = 0; i < pop; ++i) {
    Rng rng = make_rng(cfg.seed, "genetic.init", i);
    auto& ind = popn[i];
    ind.genes = Eigen::VectorXd::Zero(p);
    if (i == 0) continue;  // identity weights
    if (i == 1) {
      ind.genes[p - 1] = clampg(std::log(100.0));  // emphasise the propensity score
      continue;
    }
    std::uniform_real_distribution<double> u(glo, ghi);
    for (Eigen::Index k = 0; k < p; ++k) ind.genes[k] = clampg(0.5 * u(rng));
  }
  auto evaluate = [&](std::vector<Individual>& v) {
    parallel_for(v.size(), cfg.jobs, [&](std::size_t i) {
      if (v[i].evaluated) return;
      const Eigen::VectorXd w = v[i].genes.array().exp();
      v[i].fit = fitness(d, detail::nearest_controls(d, Z, w, cfg.distance_tolerance));
      v[i].evaluated = true;
    });
  };
  auto by_fitness = [](const Individual& a, const Individual& b) { return fitter(a.fit, b.fit); };

  MatchedCohort out;
  evaluate(popn);
  std::stable_sort(popn.begin(), popn.end(), by_fitness);
  Individual best = popn.front();
  int stale = 0, gen = 0;
  auto record = [&](int g) {
    double mean = 0;
    for (const auto& ind : popn) mean += ind.fit.empty() ? 0 : ind.fit.front();
    std::vector<double> bw(best.genes.size());
    for (Eigen::Index k = 0; k < best.genes.size(); ++k) bw[k] = std::exp(best.genes[k]);
    out.trace.push_back({g, best.fit.empty() ? 1.0 : best.fit.front(), mean / pop, bw});
  };
  record(0);
  while (gen < cfg.max_generations && stale < cfg.wait_generations) {
    if (cfg.time_budget_seconds > 0) {
      const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (el > cfg.time_budget_seconds) {
        out.budget_exceeded = true;
        break;
      }
    }
    ++gen;
    std::vector<Individual> next(popn.begin(), popn.begin() + n_elite);
    next.resize(pop);
    for (int i = n_elite; i < pop; ++i) {
      Rng rng = make_rng(cfg.seed, "genetic.offspring", static_cast<std::uint64_t>(gen) * pop + i);
      std::uniform_int_distribution<int> pick(0, pop - 1);
      auto tournament = [&]() -> const Individual& {
        int b = pick(rng);
        for (int t = 1; t < 4; ++t) b = std::min(b, pick(rng));  // popn is sorted best first
        return popn[b];
      };
      const auto& pa = tournament();
      const auto& pb = tournament();
      Individual child;
      child.genes.resize(p);
      std::normal_distribution<double> mut(0.0, 0.3);
      for (Eigen::Index k = 0; k < p; ++k) {
        const double lo = std::min(pa.genes[k], pb.genes[k]), hi = std::max(pa.genes[k], pb.genes[k]);
        const double span = hi - lo;
        std::uniform_real_distribution<double> blend(lo - 0.5 * span, hi + 0.5 * span);
        double g = span > 0 ? blend(rng) : lo;
        if (uniform01(rng) < 0.2) g += mut(rng);
        child.genes[k] = clampg(g);
      }
      next[i] = std::move(child);
    }
    evaluate(next);
    std::stable_sort(next.begin(), next.end(), by_fitness);
    popn = std::move(next);
    if (fitter(popn.front().fit, best.fit)) {
      best = popn.front();
      stale = 0;
    } else {
      ++stale;
    }
    record(gen);
  }
  const Eigen::VectorXd w = best.genes.array().exp();
  auto cohort = match_with_weights(d, w, scaling, cfg.distance_tolerance);
  cohort.fitness = best.fit;
  cohort.seed = cfg.seed;
  cohort.budget_exceeded = out.budget_exceeded;
  cohort.generations = gen;
  cohort.trace = std::move(out.trace);
  return cohort;
}

inline void write_cohort_csv(std::ostream& out, const MatchData& d, const MatchedCohort& c) {
  csv::Writer w(out);
  w.row({"treated_id", "control_id", "distance", "K_control"});
  for (const auto& p : c.pairs)
    w.row({csv::fmt(d.ids[p.treated]), csv::fmt(d.ids[p.control]), csv::fmt(p.distance),
           csv::fmt(c.reuse.at(p.control))});
}

// Rebuilds pairs from a cohort CSV against the unit table they came from.
inline std::vector<Pair> read_cohort_csv(std::istream& in, const MatchData& d) {
  auto tab = csv::read_table(in);
  const auto ct = tab.require("treated_id"), cc = tab.require("control_id"), cd = tab.require("distance");
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < d.size(); ++i) row_of[d.ids[i]] = i;
  std::vector<Pair> pairs;
  for (const auto& r : tab.rows) {
    auto t = csv::parse_int(r[ct]), c = csv::parse_int(r[cc]);
    if (!t || !c || !row_of.count(static_cast<int>(*t)) || !row_of.count(static_cast<int>(*c)))
      throw SchemaError("cohort refers to unknown unit ids");
    pairs.push_back({row_of[static_cast<int>(*t)], row_of[static_cast<int>(*c)],
                     csv::parse_double(r[cd]).value_or(0)});
  }
  return pairs;
}

inline nlohmann::json weights_json(const MatchData& d, const MatchedCohort& c, const MatchConfig& cfg) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["propensity_scale"] = "probability";
  j["scaling"] = "inverse Cholesky factor of the covariate covariance";
  j["ridged_covariance"] = c.ridged;
  j["budget_exceeded"] = c.budget_exceeded;
  j["generations"] = c.generations;
  j["config"] = {{"population", cfg.population_size},
                 {"wait_generations", cfg.wait_generations},
                 {"max_generations", cfg.max_generations},
                 {"tolerance", cfg.distance_tolerance},
                 {"weight_bounds", {cfg.weight_lo, cfg.weight_hi}}};
  for (std::size_t k = 0; k < d.names.size(); ++k) j["weights"][d.names[k]] = c.weights[k];
  j["fitness"] = c.fitness;
  auto& tr = j["trace"] = nlohmann::json::array();
  for (const auto& t : c.trace)
    tr.push_back({{"generation", t.generation}, {"best_min_p", t.best_min_p},
                  {"mean_min_p", t.mean_min_p}, {"best_weights", t.best_weights}});
  return j;
}

// Groups of (treated, matched control) units for balance reporting.
inline Groups matched_groups(std::span<const Unit> units, std::span<const Pair> pairs) {
  Groups g;
  for (const auto& p : pairs) {
    g.treated.push_back(&units[p.treated]);
    g.control.push_back(&units[p.control]);
  }
  return g;
}

inline Groups unmatched_groups(std::span<const Unit> units) {
  Groups g;
  for (const auto& u : units) (u.treated ? g.treated : g.control).push_back(&u);
  return g;
}

struct OverlapAudit {
  std::size_t unique_controls = 0;
  std::size_t disjoint_controls = 0;
};

// Matched-control uniqueness and the largest subset with mutually disjoint
// windows [t - W, t + 1] per game (earliest-end-first interval scheduling).
inline OverlapAudit overlap_audit(std::span<const Unit> units, std::span<const Pair> pairs) {
  OverlapAudit a;
  std::set<std::size_t> ctrl;
  for (const auto& p : pairs) ctrl.insert(p.control);
  a.unique_controls = ctrl.size();
  std::map<std::string, std::vector<std::pair<Ticks, Ticks>>> by_game;
  for (auto i : ctrl) by_game[units[i].game_id].emplace_back(units[i].window_end(), units[i].window_start());
  for (auto& [g, iv] : by_game) {
    std::sort(iv.begin(), iv.end());
    bool first = true;
    Ticks last_end = 0;
    for (auto [end, start] : iv) {
      if (first || start > last_end) {
        ++a.disjoint_controls;
        last_end = end;
        first = false;
      }
    }
  }
  return a;
}

}  // namespace runstop
