#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "runstop/effects.hpp"
#include "runstop/matching.hpp"

using namespace runstop;

namespace {

MatchData toy_data(const Eigen::MatrixXd& X, const std::vector<bool>& treated) {
  MatchData d;
  d.X = X;
  d.treated = treated;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    d.ids.push_back(static_cast<int>(i) + 1);
    d.groups.push_back(static_cast<int>(i));
  }
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    d.binary.push_back(false);
    d.names.push_back("x" + std::to_string(k));
  }
  return d;
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, int p) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd A(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) A(i, j) = z(rng);
  return A * A.transpose() + 0.5 * Eigen::MatrixXd::Identity(p, p);
}

}  // namespace

TEST_CASE("GMD trivial cases", "[matching]") {
  const Eigen::VectorXd a = Eigen::Vector2d(0, 0), b = Eigen::Vector2d(3, 4);
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
  CHECK(gmd(a, b, w, Eigen::MatrixXd::Identity(2, 2)) == Catch::Approx(5.0));
  CHECK(gmd(b, b, w, Eigen::MatrixXd::Identity(2, 2)) == 0.0);
}

TEST_CASE("GMD equals an eigendecomposition evaluation", "[matching][oracle]") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int rep = 0; rep < 200; ++rep) {
    const Eigen::MatrixXd M = random_spd(rng, 5);  // scaling'W scaling, the metric
    const Eigen::VectorXd w = Eigen::VectorXd::NullaryExpr(5, [&] { return u(rng); });
    // Any scaling with S' diag(w) S = M: take S = diag(w)^{-1/2} L' from M = L L'.
    const Eigen::MatrixXd L = M.llt().matrixL();
    const Eigen::MatrixXd S = w.cwiseSqrt().cwiseInverse().asDiagonal() * L.transpose();
    Eigen::VectorXd xi(5), xj(5);
    for (int k = 0; k < 5; ++k) {
      xi[k] = z(rng);
      xj[k] = z(rng);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    const Eigen::VectorXd proj = es.eigenvectors().transpose() * (xi - xj);
    const double want = std::sqrt((proj.array().square() * es.eigenvalues().array()).sum());
    CHECK(std::abs(gmd(xi, xj, w, S) - want) <= 1e-10 * std::max(1.0, want));
  }
}

TEST_CASE("whitening with unit weights is the Mahalanobis distance", "[matching][oracle]") {
  std::mt19937_64 rng(32);
  std::normal_distribution<double> z;
  const int n = 300, p = 4;
  const Eigen::MatrixXd C = random_spd(rng, p).llt().matrixL();
  Eigen::MatrixXd X(n, p);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd e(p);
    for (int k = 0; k < p; ++k) e[k] = z(rng);
    X.row(i) = (C * e).transpose();
  }
  const auto s = compute_scaling(X);
  CHECK_FALSE(s.ridged);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - mean;
  const Eigen::MatrixXd cov = Xc.transpose() * Xc / (n - 1);
  CHECK((s.S * cov * s.S.transpose() - Eigen::MatrixXd::Identity(p, p)).norm() < 1e-10);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::VectorXd diff = (X.row(rep) - X.row(rep + 100)).transpose();
    const Eigen::VectorXd proj = es.eigenvectors().transpose() * diff;
    const double want = std::sqrt((proj.array().square() / es.eigenvalues().array()).sum());
    CHECK(gmd(X.row(rep).transpose(), X.row(rep + 100).transpose(), Eigen::VectorXd::Ones(p), s.S) ==
          Catch::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("pairings do not depend on units of measurement", "[matching]") {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> z;
  const int n = 120, p = 3;
  Eigen::MatrixXd X(n, p);
  std::vector<bool> tr(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < p; ++k) X(i, k) = z(rng);
    tr[i] = i % 5 == 0;
  }
  Eigen::MatrixXd Y = X;
  Y.col(0) *= 1000.0;
  Y.col(2) *= 0.01;
  const Eigen::VectorXd w = Eigen::Vector3d(2.0, 0.5, 7.0);
  const auto a = match_with_weights(toy_data(X, tr), w);
  const auto b = match_with_weights(toy_data(Y, tr), w);
  REQUIRE(a.pairs.size() == b.pairs.size());
  for (std::size_t i = 0; i < a.pairs.size(); ++i) CHECK(a.pairs[i].control == b.pairs[i].control);
}

TEST_CASE("nearest controls equal an exhaustive scan", "[matching][oracle]") {
  std::mt19937_64 rng(34);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.1, 10);
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::MatrixXd X(25, 3);
    std::vector<bool> tr(25, false);
    for (int i = 0; i < 25; ++i)
      for (int k = 0; k < 3; ++k) X(i, k) = rep % 2 ? std::round(z(rng)) : z(rng);
    for (int i = 0; i < 5; ++i) tr[i * 5] = true;
    const auto d = toy_data(X, tr);
    const Eigen::VectorXd w = Eigen::Vector3d(u(rng), u(rng), u(rng));
    const auto s = compute_scaling(X);
    const auto c = match_with_weights(d, w, s, 1e-9);
    REQUIRE(c.pairs.size() == 5);
    for (const auto& pr : c.pairs) {
      double best = INFINITY;
      for (int j = 0; j < 25; ++j)
        if (!tr[j]) best = std::min(best, gmd(X.row(pr.treated).transpose(), X.row(j).transpose(), w, s.S));
      int pick = -1;
      for (int j = 0; j < 25; ++j) {
        if (tr[j]) continue;
        const double dist = gmd(X.row(pr.treated).transpose(), X.row(j).transpose(), w, s.S);
        if (dist - best <= 1e-9 && (pick < 0 || d.ids[j] < d.ids[pick])) pick = j;
      }
      CHECK(static_cast<int>(pr.control) == pick);
      CHECK(pr.distance == Catch::Approx(best).margin(1e-9));
    }
  }
}

TEST_CASE("single treated and single control pair up", "[matching]") {
  Eigen::MatrixXd X(2, 2);
  X << 0, 1, 3, 2;
  const auto c = match_with_weights(toy_data(X, {true, false}), Eigen::VectorXd::Ones(2));
  REQUIRE(c.pairs.size() == 1);
  CHECK(c.pairs[0].control == 1);
  Eigen::MatrixXd Y(2, 2);
  Y << 0, 1, 3, 2;
  CHECK_THROWS_AS(match_with_weights(toy_data(Y, {true, true}), Eigen::VectorXd::Ones(2)), DomainError);
}

TEST_CASE("fitness of a cohort matched to itself is maximal", "[matching]") {
  Eigen::MatrixXd X(6, 2);
  X << 1, 0, 2, 1, 3, 0, 1, 0, 2, 1, 3, 0;
  const auto d = toy_data(X, {true, true, true, false, false, false});
  const std::vector<Pair> pairs = {{0, 3, 0}, {1, 4, 0}, {2, 5, 0}};
  for (double p : fitness(d, pairs)) CHECK(p == 1.0);
}

TEST_CASE("lexicographic fitness order", "[matching]") {
  CHECK(fitter({0.2, 0.5}, {0.1, 0.9}));
  CHECK_FALSE(fitter({0.1, 0.9}, {0.2, 0.5}));
  CHECK(fitter({0.2, 0.6}, {0.2, 0.5}));
  CHECK_FALSE(fitter({0.2, 0.5}, {0.2, 0.5}));
}

namespace {

// Two covariates: x0 drives treatment, x1 is wide noise.
MatchData confounded_toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  const int n = 240;
  Eigen::MatrixXd X(n, 2);
  std::vector<bool> tr(n);
  for (int i = 0; i < n; ++i) {
    tr[i] = i < 60;
    X(i, 0) = z(rng) + (tr[i] ? 0.9 : 0.0);
    X(i, 1) = 5 * z(rng);
  }
  return toy_data(X, tr);
}

}  // namespace

TEST_CASE("genetic search keeps the identity weighting as a floor", "[matching]") {
  const auto d = confounded_toy(35);
  MatchConfig m;
  m.population_size = 30;
  m.max_generations = 6;
  m.seed = 3;
  const auto best = genetic_search(d, m);
  const auto ident = match_with_weights(d, Eigen::VectorXd::Ones(2));
  const auto f_ident = fitness(d, ident.pairs);
  CHECK_FALSE(fitter(f_ident, best.fitness));
}

TEST_CASE("learned weights favour the confounded covariate like a grid search", "[matching][oracle]") {
  const auto d = confounded_toy(36);
  const auto s = compute_scaling(d.X);
  std::vector<double> best_fit;
  Eigen::VectorXd best_w;
  for (int a = 0; a < 50; ++a)
    for (int b = 0; b < 50; ++b) {
      const Eigen::VectorXd w = Eigen::Vector2d(std::pow(10.0, -3 + 6.0 * a / 49), std::pow(10.0, -3 + 6.0 * b / 49));
      const auto f = fitness(d, match_with_weights(d, w, s).pairs);
      if (best_fit.empty() || fitter(f, best_fit)) {
        best_fit = f;
        best_w = w;
      }
    }
  REQUIRE(best_w[0] > best_w[1]);
  MatchConfig m;
  m.population_size = 60;
  m.max_generations = 15;
  m.seed = 4;
  const auto ga = genetic_search(d, m);
  CHECK(ga.weights[0] > ga.weights[1]);
  CHECK(ga.fitness.front() >= 0.5 * best_fit.front());
}

namespace {

// Abadie-Imbens variance from its definition, with the within-arm neighbour
// found by scanning every row of another game.
double ai_se_oracle(const MatchData& d, const MatchedCohort& c, const std::vector<double>& y) {
  const double n1 = static_cast<double>(c.pairs.size());
  double att = 0;
  for (const auto& p : c.pairs) att += y[p.treated] - y[p.control];
  att /= n1;
  double v = 0;
  for (const auto& p : c.pairs) v += std::pow(y[p.treated] - y[p.control] - att, 2);
  std::map<std::size_t, int> K;
  for (const auto& p : c.pairs) K[p.control]++;
  for (const auto& [j, k] : K) {
    if (k < 2) continue;
    double best = INFINITY;
    std::size_t nn = j;
    for (std::size_t l = 0; l < d.size(); ++l) {
      if (l == j || d.treated[l] || d.groups[l] == d.groups[j]) continue;
      const double dist = gmd(d.X.row(j).transpose(), d.X.row(l).transpose(), c.weights, c.scaling);
      if (dist < best - 1e-12) {
        best = dist;
        nn = l;
      }
    }
    const double s2 = nn == j ? 0.0 : 0.5 * std::pow(y[j] - y[nn], 2);
    v += static_cast<double>(k) * (k - 1) * s2;
  }
  return std::sqrt(v) / n1;
}

}  // namespace

TEST_CASE("ATT and its variance on a hand cohort", "[effects][oracle]") {
  // Three treated at 0, 0.1, 5; controls at 0.05, 4.9, 5.2, 9.
  Eigen::MatrixXd X(7, 1);
  X << 0, 0.1, 5, 0.05, 4.9, 5.2, 9;
  auto d = toy_data(X, {true, true, true, false, false, false, false});
  const std::vector<double> y = {3, 1, 2, 1.5, 0.5, 4, 10};
  const auto c = match_with_weights(d, Eigen::VectorXd::Ones(1));
  REQUIRE(c.pairs.size() == 3);
  CHECK(c.pairs[0].control == 3);
  CHECK(c.pairs[1].control == 3);
  CHECK(c.pairs[2].control == 4);
  const auto e = att(d, c, y);
  CHECK(e.att == Catch::Approx(((3 - 1.5) + (1 - 1.5) + (2 - 0.5)) / 3));
  CHECK(e.se > 0);
  CHECK(e.se == Catch::Approx(ai_se_oracle(d, c, y)).epsilon(1e-12));
  // The within-arm neighbour must come from another game.
  d.groups = {0, 1, 2, 3, 3, 5, 6};
  CHECK(att(d, c, y).se == Catch::Approx(ai_se_oracle(d, c, y)).epsilon(1e-12));
  CHECK(att(d, c, y).se != Catch::Approx(e.se));
}

TEST_CASE("identical outcomes within pairs give a zero effect", "[effects]") {
  Eigen::MatrixXd X(4, 1);
  X << 0, 1, 0.1, 1.1;
  const auto d = toy_data(X, {true, true, false, false});
  const std::vector<double> y = {2, 5, 2, 5};
  const auto e = att(d, match_with_weights(d, Eigen::VectorXd::Ones(1)), y);
  CHECK(e.att == 0.0);
  CHECK(e.p_value == 1.0);
}

TEST_CASE("Abadie-Imbens standard error is calibrated", "[effects][oracle]") {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> z;
  const int draws = 10000, nt = 30, nc = 90;
  int cover = 0;
  for (int r = 0; r < draws; ++r) {
    Eigen::MatrixXd X(nt + nc, 1);
    std::vector<bool> tr(nt + nc);
    std::vector<double> y(nt + nc);
    for (int i = 0; i < nt + nc; ++i) {
      tr[i] = i < nt;
      X(i, 0) = z(rng) + (tr[i] ? 0.5 : 0.0);
      y[i] = X(i, 0) + z(rng) + (tr[i] ? 1.0 : 0.0);
    }
    const auto d = toy_data(X, tr);
    const auto e = att(d, match_with_weights(d, Eigen::VectorXd::Ones(1)), y);
    cover += std::abs(e.att - 1.0) <= 1.959963984540054 * e.se;
  }
  const double rate = static_cast<double>(cover) / draws;
  CHECK(rate >= 0.93);
  CHECK(rate <= 0.97);
}

namespace {

Unit toy_unit(std::string game, double minutes, bool treated, double y, std::string bit = "A") {
  Unit u;
  u.game_id = std::move(game);
  u.t = to_ticks(minutes);
  u.treated = treated;
  u.outcome = y;
  u.cov.bit_team = std::move(bit);
  return u;
}

}  // namespace

TEST_CASE("naive difference is the two-group mean gap", "[effects]") {
  std::vector<Unit> units;
  std::mt19937_64 rng(38);
  std::normal_distribution<double> z;
  double st = 0, sc = 0;
  int nt = 0, nc = 0;
  for (int i = 0; i < 50; ++i) {
    const bool t = i % 3 == 0;
    const double y = z(rng);
    units.push_back(toy_unit("g", 5, t, y));
    (t ? st : sc) += y;
    (t ? nt : nc)++;
  }
  CHECK(naive_diff(units) == Catch::Approx(st / nt - sc / nc));
  std::vector<Unit> flat = {toy_unit("g", 5, true, 1.0), toy_unit("g", 6, false, 1.0)};
  CHECK(naive_diff(flat) == 0.0);
}

TEST_CASE("franchise effects under the null", "[effects]") {
  std::mt19937_64 rng(39);
  std::normal_distribution<double> z;
  int raw = 0, adjusted_any = 0, tests = 0;
  const int reps = 17, franchises = 30;
  for (int r = 0; r < reps; ++r) {
    std::vector<Unit> units;
    std::vector<Pair> pairs;
    for (int f = 0; f < franchises; ++f)
      for (int k = 0; k < 12; ++k) {
        const std::string name = "F" + std::to_string(f);
        units.push_back(toy_unit("g", 5, true, z(rng), name));
        units.push_back(toy_unit("g", 5, false, z(rng), name));
        pairs.push_back({units.size() - 2, units.size() - 1, 0});
      }
    FranchiseOptions opt;
    opt.bootstrap = 200;
    opt.permutations = 4000;
    opt.seed = 100 + r;
    const auto fx = franchise_effects(units, pairs, opt);
    bool any = false;
    for (const auto& f : fx) {
      ++tests;
      raw += f.p_raw < 0.05;
      any = any || f.rejected;
    }
    adjusted_any += any;
  }
  const double rate = static_cast<double>(raw) / tests;
  CHECK(rate > 0.02);
  CHECK(rate < 0.09);
  CHECK(adjusted_any <= 3);
}

TEST_CASE("single-pair franchise has a degenerate interval", "[effects]") {
  std::vector<Unit> units = {toy_unit("g", 5, true, 2.0, "X"), toy_unit("g", 6, false, 0.5, "X")};
  std::vector<Pair> pairs = {{0, 1, 0}};
  FranchiseOptions opt;
  opt.bootstrap = 100;
  opt.permutations = 100;
  const auto fx = franchise_effects(units, pairs, opt);
  REQUIRE(fx.size() == 1);
  CHECK(fx[0].att == Catch::Approx(1.5));
  CHECK(fx[0].ci_lo == Catch::Approx(1.5));
  CHECK(fx[0].ci_hi == Catch::Approx(1.5));
}

TEST_CASE("overlap audit equals exhaustive disjoint subsets", "[effects][oracle]") {
  std::mt19937_64 rng(40);
  std::uniform_real_distribution<double> when(3, 10);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<Unit> units;
    std::vector<Pair> pairs;
    for (int k = 0; k < 10; ++k) {
      units.push_back(toy_unit(rep % 2 ? "g" : (k % 2 ? "a" : "b"), std::round(when(rng) * 60) / 60, false, 0));
      units.push_back(toy_unit("g", 20, true, 0));
      pairs.push_back({units.size() - 1, units.size() - 2, 0});
      if (k % 3 == 0) pairs.push_back({units.size() - 1, units.size() - 2, 0});
    }
    std::vector<std::size_t> ctrl;
    for (std::size_t i = 0; i < units.size(); i += 2) ctrl.push_back(i);
    std::size_t best = 0;
    for (int m = 0; m < (1 << ctrl.size()); ++m) {
      bool ok = true;
      for (std::size_t a = 0; a < ctrl.size() && ok; ++a)
        for (std::size_t b = a + 1; b < ctrl.size() && ok; ++b) {
          if (!(m >> a & 1) || !(m >> b & 1)) continue;
          const auto& u = units[ctrl[a]];
          const auto& v = units[ctrl[b]];
          if (u.game_id == v.game_id && u.window_start() <= v.window_end() && v.window_start() <= u.window_end())
            ok = false;
        }
      if (ok) best = std::max<std::size_t>(best, __builtin_popcount(m));
    }
    const auto a = overlap_audit(units, pairs);
    CHECK(a.unique_controls == ctrl.size());
    CHECK(a.disjoint_controls == best);
  }
}
