#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "runstop/propensity.hpp"

using namespace runstop;

namespace {

// Plain Newton-Raphson for the unpenalized logistic likelihood, no step control.
Eigen::VectorXd newton_reference(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(X.cols());
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd mu = (1.0 + (-(X * b).array()).exp()).inverse().matrix();
    const Eigen::VectorXd w = (mu.array() * (1 - mu.array())).matrix();
    const Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X;
    const Eigen::VectorXd step = H.ldlt().solve(X.transpose() * (y - mu));
    b += step;
    if (step.norm() < 1e-14) break;
  }
  return b;
}

std::vector<Unit> random_units(std::mt19937_64& rng, int n, double signal) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Unit> units(n);
  for (int i = 0; i < n; ++i) {
    auto& c = units[i].cov;
    c.run_point_total = 9 + std::floor(3 * u(rng));
    c.run_duration = 0.3 + 1.7 * u(rng);
    c.time_left = 1 + 45 * u(rng);
    c.win_probability = u(rng);
    c.ssd_bor = std::round(10 * z(rng));
    c.ssd_eor = c.ssd_bor - 9;
    c.possession = u(rng) < 0.5;
    c.home = u(rng) < 0.5;
    c.week_in_season = 1 + std::floor(20 * u(rng));
    c.over_under = 200 + 5 * z(rng);
    c.spread = 5 * z(rng);
    c.moneyline = 100 + 50 * z(rng);
    c.bit_team = "T" + std::to_string(i % 4);
    c.opposing_team = "T" + std::to_string((i + 1) % 4);
    const double eta = -1.0 + signal * (c.run_duration - 1.15) * 4;
    units[i].treated = u(rng) < 1 / (1 + std::exp(-eta));
    units[i].unit_id = i + 1;
  }
  return units;
}

}  // namespace

TEST_CASE("spline basis is a partition of unity", "[propensity]") {
  SplineBasis b;
  b.lo = -2;
  b.hi = 3;
  b.interior = {-1, 0, 0.5, 2};
  std::vector<double> v(b.size());
  for (double x = -2.5; x <= 3.5; x += 0.01) {
    b.eval(x, v.data());
    double s = 0;
    for (double e : v) {
      CHECK(e >= -1e-15);
      s += e;
    }
    CHECK(s == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("logistic fit equals a reference Newton solver", "[propensity][oracle]") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0, 1);
  const int n = 2000;
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1;
    X(i, 1) = z(rng);
    X(i, 2) = z(rng) + 0.3 * X(i, 1);
    const double eta = -0.4 + 0.8 * X(i, 1) - 1.1 * X(i, 2);
    y[i] = u(rng) < 1 / (1 + std::exp(-eta));
  }
  const auto fit = fit_logistic(X, y, Eigen::MatrixXd::Zero(3, 3));
  const auto ref = newton_reference(X, y);
  for (int k = 0; k < 3; ++k) CHECK(std::abs(fit.beta[k] - ref[k]) < 1e-4);
}

TEST_CASE("covariates unrelated to treatment predict the prevalence", "[propensity]") {
  std::mt19937_64 rng(42);
  auto units = random_units(rng, 3000, 0.0);
  PropensityOptions opt;
  opt.knots = 4;
  opt.lambda = 100.0;
  const auto m = fit_propensity(units, opt);
  double prev = 0;
  for (const auto& u : units) prev += u.treated;
  prev /= units.size();
  for (double p : m.predict(units)) CHECK(std::abs(p - prev) < 0.1);
}

TEST_CASE("cross-validated rates at the no-signal and separable limits", "[propensity]") {
  std::mt19937_64 rng(43);
  auto flat = random_units(rng, 600, 0.0);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& x : flat) x.treated = u(rng) < 0.5;
  PropensityOptions opt;
  opt.splines = false;
  opt.bit_team = opt.opposing_team = false;
  const auto r0 = evaluate_cv(flat, opt, 1.0, 40);
  CHECK(r0.splits == 40);
  CHECK(std::abs(r0.tpr + r0.tnr - 1.0) < 0.15);

  auto sep = random_units(rng, 600, 25.0);
  const auto r1 = evaluate_cv(sep, opt, 1e-3, 40);
  CHECK(r1.tpr >= 0.95);
  CHECK(r1.tnr >= 0.95);
}

TEST_CASE("propensity fits need both classes", "[propensity]") {
  std::mt19937_64 rng(44);
  auto units = random_units(rng, 200, 0.0);
  for (auto& u : units) u.treated = false;
  units[0].treated = true;
  CHECK_THROWS_AS(fit_propensity(units), DomainError);
}

TEST_CASE("propensity model survives a JSON round trip", "[propensity]") {
  std::mt19937_64 rng(45);
  auto units = random_units(rng, 800, 1.0);
  PropensityOptions opt;
  opt.knots = 5;
  opt.lambda_grid = {0.1, 10.0};
  const auto m = fit_propensity(units, opt);
  const auto back = propensity_from_json(nlohmann::json::parse(to_json(m).dump()));
  const auto a = m.predict(units), b = back.predict(units);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).epsilon(1e-12));
  CHECK(m.cv_deviance.size() == 2);
}
