#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "runstop/common.hpp"
#include "runstop/logistic.hpp"
#include "runstop/rng.hpp"
#include "runstop/units.hpp"

namespace runstop {

// Cubic B-spline basis on [lo, hi] with the given interior knots. Values
// outside the range are clamped to the boundary.
struct SplineBasis {
  double lo = 0, hi = 1;
  std::vector<double> interior;
  int degree = 3;

  std::size_t size() const { return interior.size() + degree + 1; }

  std::vector<double> knots() const {
    std::vector<double> k(degree + 1, lo);
    k.insert(k.end(), interior.begin(), interior.end());
    k.insert(k.end(), degree + 1, hi);
    return k;
  }

  void eval(double x, double* out) const {
    const auto k = knots();
    const std::size_t n = size();
    x = std::clamp(x, lo, hi);
    // Cox-de Boor on the augmented knot vector.
    std::vector<double> b(k.size() - 1, 0.0);
    std::size_t span = degree;
    while (span + 1 < k.size() - degree - 1 && x >= k[span + 1]) ++span;
    b[span] = 1.0;
    for (int d = 1; d <= degree; ++d) {
      for (std::size_t i = 0; i + d < k.size() - 1; ++i) {
        double v = 0;
        const double l = k[i + d] - k[i], r = k[i + d + 1] - k[i + 1];
        if (l > 0) v += (x - k[i]) / l * b[i];
        if (r > 0) v += (k[i + d + 1] - x) / r * b[i + 1];
        b[i] = v;
      }
    }
    for (std::size_t i = 0; i < n; ++i) out[i] = b[i];
  }
};

enum class TermKind { spline, linear, factor };

struct Term {
  std::string name;
  TermKind kind = TermKind::linear;
  SplineBasis basis;                // spline
  double center = 0, scale = 1;     // linear
  std::vector<std::string> levels;  // factor, first level is the reference
  std::size_t offset = 0;           // first design column

  std::size_t width() const {
    switch (kind) {
      case TermKind::spline: return basis.size();
      case TermKind::linear: return 1;
      case TermKind::factor: return levels.empty() ? 0 : levels.size() - 1;
    }
    return 0;
  }
};

struct PropensityOptions {
  int knots = 10;
  std::vector<double> lambda_grid = {1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0};
  int cv_folds = 5;
  bool splines = true;        // false: every numeric covariate enters linearly
  bool bit_team = true;
  bool opposing_team = true;
  std::optional<double> lambda;  // fixed penalty, skips the grid search
  IrlsOptions irls;
  std::uint64_t seed = 1;
};

struct PropensityModel {
  std::vector<Term> terms;
  Eigen::VectorXd beta;
  double lambda = 0;
  std::uint64_t seed = 0;
  std::vector<double> cv_deviance;  // parallel to the lambda grid searched
  std::vector<double> lambda_grid;
  double deviance = 0;
  double null_deviance = 0;
  int iterations = 0;

  std::size_t columns() const {
    std::size_t c = 1;
    for (const auto& t : terms) c += t.width();
    return c;
  }

  double predict(const Unit& u) const;
  std::vector<double> predict(std::span<const Unit> units) const;
};

namespace detail {

inline double numeric_by_name(const CovariateVector& c, std::string_view name) {
  const auto v = numeric_values(c);
  for (std::size_t k = 0; k < kNumNumeric; ++k)
    if (name == kNumericCovariates[k]) return v[k];
  throw DomainError("unknown covariate " + std::string(name));
}

inline const std::string& factor_by_name(const CovariateVector& c, std::string_view name) {
  return name == "bit_team" ? c.bit_team : c.opposing_team;
}

inline std::vector<double> quantile_knots(std::vector<double> x, int k) {
  std::sort(x.begin(), x.end());
  std::vector<double> out;
  const double lo = x.front(), hi = x.back();
  for (int i = 1; i <= k; ++i) {
    const double pos = static_cast<double>(i) / (k + 1) * (x.size() - 1);
    const auto j = static_cast<std::size_t>(pos);
    const double frac = pos - j;
    const double q = j + 1 < x.size() ? x[j] * (1 - frac) + x[j + 1] * frac : x[j];
    if (q > lo && q < hi && (out.empty() || q > out.back() + 1e-12 * (hi - lo))) out.push_back(q);
  }
  return out;
}

inline std::vector<Term> make_terms(std::span<const Unit> units, const PropensityOptions& opt) {
  std::vector<Term> terms;
  for (std::size_t k = 0; k < kNumNumeric; ++k) {
    Term t;
    t.name = kNumericCovariates[k];
    std::vector<double> x;
    x.reserve(units.size());
    for (const auto& u : units) x.push_back(numeric_values(u.cov)[k]);
    std::vector<double> uniq = x;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() <= 1) continue;
    if (opt.splines && uniq.size() > 4 && !is_binary_covariate(k)) {
      t.kind = TermKind::spline;
      t.basis.lo = uniq.front();
      t.basis.hi = uniq.back();
      t.basis.interior = quantile_knots(x, opt.knots);
    } else {
      t.kind = TermKind::linear;
      const double mean = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
      double ss = 0;
      for (double v : x) ss += (v - mean) * (v - mean);
      t.center = mean;
      t.scale = std::sqrt(ss / x.size());
      if (t.scale <= 0) t.scale = 1;
    }
    terms.push_back(std::move(t));
  }
  for (const char* name : {"bit_team", "opposing_team"}) {
    if (std::string_view(name) == "bit_team" ? !opt.bit_team : !opt.opposing_team) continue;
    std::map<std::string, int> seen;
    for (const auto& u : units) seen[factor_by_name(u.cov, name)]++;
    if (seen.size() < 2) continue;
    Term t;
    t.name = name;
    t.kind = TermKind::factor;
    for (const auto& [lvl, n] : seen) t.levels.push_back(lvl);
    terms.push_back(std::move(t));
  }
  std::size_t off = 1;
  for (auto& t : terms) {
    t.offset = off;
    off += t.width();
  }
  return terms;
}

inline void design_row(const std::vector<Term>& terms, const Unit& u, double* row) {
  row[0] = 1.0;
  for (const auto& t : terms) {
    double* r = row + t.offset;
    switch (t.kind) {
      case TermKind::spline: t.basis.eval(numeric_by_name(u.cov, t.name), r); break;
      case TermKind::linear: r[0] = (numeric_by_name(u.cov, t.name) - t.center) / t.scale; break;
      case TermKind::factor: {
        const auto& v = factor_by_name(u.cov, t.name);
        for (std::size_t l = 1; l < t.levels.size(); ++l) r[l - 1] = v == t.levels[l] ? 1.0 : 0.0;
        break;
      }
    }
  }
}

inline Eigen::MatrixXd design(const std::vector<Term>& terms, std::size_t cols,
                              std::span<const Unit> units) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> X(units.size(), cols);
  X.setZero();
  for (std::size_t i = 0; i < units.size(); ++i) design_row(terms, units[i], X.row(i).data());
  return X;
}

// Unit-λ penalty: second differences plus a small ridge on each spline
// block, ridge on linear and factor columns, intercept free.
inline Eigen::MatrixXd penalty_shape(const std::vector<Term>& terms, std::size_t cols) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(cols, cols);
  for (const auto& t : terms) {
    const auto w = t.width();
    if (t.kind == TermKind::spline) {
      Eigen::MatrixXd D = Eigen::MatrixXd::Zero(w >= 2 ? w - 2 : 0, w);
      for (std::size_t i = 0; i + 2 < w; ++i) {
        D(i, i) = 1;
        D(i, i + 1) = -2;
        D(i, i + 2) = 1;
      }
      P.block(t.offset, t.offset, w, w) =
          D.transpose() * D + 1e-2 * Eigen::MatrixXd::Identity(w, w);
    } else {
      P.block(t.offset, t.offset, w, w) = Eigen::MatrixXd::Identity(w, w);
    }
  }
  return P;
}

inline Eigen::VectorXd labels(std::span<const Unit> units) {
  Eigen::VectorXd y(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) y[i] = units[i].treated ? 1.0 : 0.0;
  return y;
}

inline double null_deviance(const Eigen::VectorXd& y) {
  const double p = y.mean();
  return binomial_deviance(y, Eigen::VectorXd::Constant(y.size(), p));
}

}  // namespace detail

inline double PropensityModel::predict(const Unit& u) const {
  std::vector<double> row(columns(), 0.0);
  detail::design_row(terms, u, row.data());
  const double eta = Eigen::Map<const Eigen::VectorXd>(row.data(), row.size()).dot(beta);
  // Keep scores strictly inside (0, 1) even for separated fits.
  return std::clamp(logistic(eta), 1e-12, 1 - 1e-12);
}

inline std::vector<double> PropensityModel::predict(std::span<const Unit> units) const {
  std::vector<double> out;
  out.reserve(units.size());
  for (const auto& u : units) out.push_back(predict(u));
  return out;
}

inline PropensityModel fit_propensity_fixed(std::span<const Unit> units, const PropensityOptions& opt,
                                            double lambda) {
  PropensityModel m;
  m.terms = detail::make_terms(units, opt);
  m.lambda = lambda;
  m.seed = opt.seed;
  const auto cols = m.columns();
  const Eigen::MatrixXd X = detail::design(m.terms, cols, units);
  const Eigen::VectorXd y = detail::labels(units);
  const Eigen::MatrixXd P = lambda * detail::penalty_shape(m.terms, cols);
  auto fit = fit_logistic(X, y, P, opt.irls);
  m.beta = fit.beta;
  m.deviance = fit.deviance;
  m.null_deviance = detail::null_deviance(y);
  m.iterations = fit.iterations;
  return m;
}

inline void check_class_sizes(std::span<const Unit> units, std::size_t min_per_class) {
  std::size_t n1 = 0;
  for (const auto& u : units) n1 += u.treated;
  if (n1 < min_per_class || units.size() - n1 < min_per_class)
    throw DomainError("propensity fit needs at least " + std::to_string(min_per_class) +
                      " units per class (treated " + std::to_string(n1) + ", control " +
                      std::to_string(units.size() - n1) + ")");
}

// Held-out deviance for each λ over stratified folds.
inline std::vector<double> cv_deviance(std::span<const Unit> units, const PropensityOptions& opt,
                                       std::span<const double> grid) {
  std::vector<std::size_t> idx1, idx0;
  for (std::size_t i = 0; i < units.size(); ++i) (units[i].treated ? idx1 : idx0).push_back(i);
  Rng rng = make_rng(opt.seed, "propensity.cv");
  std::shuffle(idx1.begin(), idx1.end(), rng);
  std::shuffle(idx0.begin(), idx0.end(), rng);
  const int K = std::max(2, opt.cv_folds);
  std::vector<int> fold(units.size());
  for (std::size_t j = 0; j < idx1.size(); ++j) fold[idx1[j]] = static_cast<int>(j % K);
  for (std::size_t j = 0; j < idx0.size(); ++j) fold[idx0[j]] = static_cast<int>(j % K);
  std::vector<double> dev(grid.size(), 0.0);
  for (int k = 0; k < K; ++k) {
    std::vector<Unit> train, test;
    for (std::size_t i = 0; i < units.size(); ++i) (fold[i] == k ? test : train).push_back(units[i]);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      try {
        auto m = fit_propensity_fixed(train, opt, grid[g]);
        const auto p = m.predict(test);
        Eigen::VectorXd y = detail::labels(test);
        dev[g] += binomial_deviance(y, Eigen::Map<const Eigen::VectorXd>(p.data(), p.size()));
      } catch (const ConvergenceError&) {
        dev[g] = std::numeric_limits<double>::infinity();
      }
    }
  }
  return dev;
}

inline PropensityModel fit_propensity(std::span<const Unit> units, const PropensityOptions& opt = {},
                                      std::size_t min_per_class = 50) {
  check_class_sizes(units, min_per_class);
  if (opt.lambda) return fit_propensity_fixed(units, opt, *opt.lambda);
  if (opt.lambda_grid.empty()) throw ConfigError("propensity.lambda_grid is empty");
  const auto dev = cv_deviance(units, opt, opt.lambda_grid);
  const auto best = static_cast<std::size_t>(std::min_element(dev.begin(), dev.end()) - dev.begin());
  if (!std::isfinite(dev[best]))
    throw ConvergenceError("propensity model failed to converge for every penalty", {});
  auto m = fit_propensity_fixed(units, opt, opt.lambda_grid[best]);
  m.cv_deviance = dev;
  m.lambda_grid = opt.lambda_grid;
  return m;
}

struct ClassificationRates {
  double tnr = 0, tpr = 0, npv = 0, ppv = 0;
  std::size_t splits = 0;
};

// Monte Carlo cross-validation: random train/test splits, 0.5 cut, rates
// averaged over splits. The penalty is held at the full-data choice.
inline ClassificationRates evaluate_cv(std::span<const Unit> units, const PropensityOptions& opt,
                                       double lambda, int splits = 1000, double train_frac = 0.7,
                                       double threshold = 0.5, unsigned jobs = 1) {
  struct Acc {
    double tnr = 0, tpr = 0, npv = 0, ppv = 0;
    bool ok = false;
  };
  std::vector<Acc> acc(splits);
  parallel_for(static_cast<std::size_t>(splits), jobs, [&](std::size_t s) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Rng rng = make_rng(opt.seed, "propensity.mccv", s * 100 + attempt);
      std::vector<std::size_t> idx(units.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto n_train = static_cast<std::size_t>(std::llround(train_frac * units.size()));
      std::vector<Unit> train, test;
      for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? train : test).push_back(units[idx[i]]);
      std::size_t n1 = 0;
      for (const auto& u : train) n1 += u.treated;
      if (n1 == 0 || n1 == train.size()) continue;  // degenerate split, resample
      PropensityModel m;
      try {
        m = fit_propensity_fixed(train, opt, lambda);
      } catch (const ConvergenceError&) {
        continue;
      }
      double tp = 0, tn = 0, fp = 0, fn = 0;
      for (const auto& u : test) {
        const bool pred = m.predict(u) > threshold;
        if (u.treated) (pred ? tp : fn) += 1;
        else (pred ? fp : tn) += 1;
      }
      auto ratio = [](double a, double b) { return a + b > 0 ? a / (a + b) : 0.0; };
      acc[s] = {ratio(tn, fp), ratio(tp, fn), ratio(tn, fn), ratio(tp, fp), true};
      return;
    }
  });
  ClassificationRates r;
  for (const auto& a : acc) {
    if (!a.ok) continue;
    r.tnr += a.tnr;
    r.tpr += a.tpr;
    r.npv += a.npv;
    r.ppv += a.ppv;
    ++r.splits;
  }
  if (r.splits) {
    r.tnr /= r.splits;
    r.tpr /= r.splits;
    r.npv /= r.splits;
    r.ppv /= r.splits;
  }
  return r;
}

inline nlohmann::json to_json(const PropensityModel& m) {
  nlohmann::json j;
  j["lambda"] = m.lambda;
  j["seed"] = m.seed;
  j["deviance"] = m.deviance;
  j["null_deviance"] = m.null_deviance;
  j["iterations"] = m.iterations;
  j["lambda_grid"] = m.lambda_grid;
  nlohmann::json cvd = nlohmann::json::array();
  for (double d : m.cv_deviance) cvd.push_back(std::isfinite(d) ? nlohmann::json(d) : nlohmann::json());
  j["cv_deviance"] = cvd;
  j["coefficients"] = std::vector<double>(m.beta.data(), m.beta.data() + m.beta.size());
  auto& terms = j["terms"] = nlohmann::json::array();
  for (const auto& t : m.terms) {
    nlohmann::json jt{{"name", t.name}, {"offset", t.offset}};
    switch (t.kind) {
      case TermKind::spline:
        jt["kind"] = "spline";
        jt["degree"] = t.basis.degree;
        jt["lo"] = t.basis.lo;
        jt["hi"] = t.basis.hi;
        jt["knots"] = t.basis.interior;
        break;
      case TermKind::linear:
        jt["kind"] = "linear";
        jt["center"] = t.center;
        jt["scale"] = t.scale;
        break;
      case TermKind::factor:
        jt["kind"] = "factor";
        jt["levels"] = t.levels;
        break;
    }
    terms.push_back(jt);
  }
  return j;
}

inline PropensityModel propensity_from_json(const nlohmann::json& j) {
  PropensityModel m;
  m.lambda = j.at("lambda");
  m.seed = j.value("seed", std::uint64_t{0});
  m.deviance = j.value("deviance", 0.0);
  m.null_deviance = j.value("null_deviance", 0.0);
  m.iterations = j.value("iterations", 0);
  for (const auto& jt : j.at("terms")) {
    Term t;
    t.name = jt.at("name");
    t.offset = jt.at("offset");
    const std::string kind = jt.at("kind");
    if (kind == "spline") {
      t.kind = TermKind::spline;
      t.basis.degree = jt.at("degree");
      t.basis.lo = jt.at("lo");
      t.basis.hi = jt.at("hi");
      t.basis.interior = jt.at("knots").get<std::vector<double>>();
    } else if (kind == "linear") {
      t.kind = TermKind::linear;
      t.center = jt.at("center");
      t.scale = jt.at("scale");
    } else {
      t.kind = TermKind::factor;
      t.levels = jt.at("levels").get<std::vector<std::string>>();
    }
    m.terms.push_back(std::move(t));
  }
  const auto coef = j.at("coefficients").get<std::vector<double>>();
  m.beta = Eigen::Map<const Eigen::VectorXd>(coef.data(), coef.size());
  if (static_cast<std::size_t>(m.beta.size()) != m.columns())
    throw SchemaError("propensity model coefficients do not match its terms");
  return m;
}

}  // namespace runstop
