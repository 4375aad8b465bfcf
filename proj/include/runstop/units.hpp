#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/logistic.hpp"
#include "runstop/outcome.hpp"
#include "runstop/timeline.hpp"

namespace runstop {

struct CovariateVector {
  std::string bit_team;
  std::string opposing_team;
  double run_point_total = 0;
  double run_duration = 0;  // minutes
  double time_left = 0;     // minutes
  double win_probability = 0.5;
  double ssd_bor = 0;
  double ssd_eor = 0;
  double possession = 0;
  double home = 0;
  double week_in_season = 1;
  double over_under = 0;
  double spread = 0;     // BiT minus opposing
  double moneyline = 0;  // negative iff BiT favoured
};

// Numeric covariates in a fixed order. Team identities are categorical and
// handled separately.
inline constexpr std::array<const char*, 12> kNumericCovariates = {
    "run_point_total", "run_duration", "time_left",  "win_probability",
    "ssd_bor",         "ssd_eor",      "possession", "home",
    "week_in_season",  "over_under",   "spread",     "moneyline"};

inline constexpr std::size_t kNumNumeric = kNumericCovariates.size();

inline bool is_binary_covariate(std::size_t k) { return k == 6 || k == 7; }

inline std::array<double, kNumNumeric> numeric_values(const CovariateVector& c) {
  return {c.run_point_total, c.run_duration, c.time_left,      c.win_probability,
          c.ssd_bor,         c.ssd_eor,      c.possession,     c.home,
          c.week_in_season,  c.over_under,   c.spread,         c.moneyline};
}

struct Unit {
  int unit_id = 0;
  std::string game_id;
  Ticks t = 0;
  int s = 0;
  bool treated = false;
  CovariateVector cov;
  double outcome = std::nan("");
  double propensity = std::nan("");
  Ticks window = 2 * kTicksPerMinute;

  int period() const { return period_of(t); }
  double minutes() const { return to_minutes(t); }
  // Pre and post windows together: [t - W, t + 1].
  Ticks window_start() const { return t - window; }
  Ticks window_end() const { return t + kPostWindow; }
};

enum class Assignment { treated, control, excluded };

struct Classification {
  Assignment assignment;
  std::string reason;  // set when excluded
};

// Unit criteria: windows inside one period, no timeout in [t-W, t) or
// (t, t+1]; treated iff the BiT side calls a timeout at exactly t. A timeout
// by the opposing side alone at t is a different treatment and is excluded.
inline Classification classify_play(const RunObservation& obs, const GameTimeline& tl) {
  const int p = period_of(obs.t);
  if (obs.t - obs.window < period_start(p) || obs.t + kPostWindow > period_end(p))
    return {Assignment::excluded, "truncated"};
  bool bit_at_t = false, opp_at_t = false;
  for (const auto& to : tl.timeouts) {
    if (to.t >= obs.t - obs.window && to.t < obs.t) return {Assignment::excluded, "pre_window_timeout"};
  }
  for (const auto& to : tl.timeouts) {
    if (to.t > obs.t && to.t <= obs.t + kPostWindow)
      return {Assignment::excluded, "post_window_timeout"};
    if (to.t == obs.t) {
      if (to.side == obs.bit_side) bit_at_t = true;
      else opp_at_t = true;
    }
  }
  if (bit_at_t) return {Assignment::treated, {}};
  if (opp_at_t) return {Assignment::excluded, "opposing_timeout"};
  return {Assignment::control, {}};
}

// In-house win probability used when the input carries none:
// P(home wins | Δ, time left, spread) with features scaled by the remaining
// time so late leads dominate.
struct WinProbModel {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(4);
  bool fitted = false;

  static Eigen::Vector4d features(double delta_home, double time_left, double spread_home) {
    const double root = std::sqrt(time_left + 1.0);
    return {1.0, delta_home / root, spread_home * (time_left / 48.0) / root, delta_home / 10.0};
  }

  double home_win(double delta_home, double time_left, double spread_home) const {
    if (!fitted) return 0.5;
    return logistic(features(delta_home, time_left, spread_home).dot(beta));
  }
};

// Fits on one snapshot per game minute of every game with a decided result.
inline WinProbModel fit_win_prob(std::span<const GameTimeline> timelines) {
  std::vector<Eigen::Vector4d> rows;
  std::vector<double> ys;
  for (const auto& tl : timelines) {
    const int final_delta = tl.delta_at(kRegulationTicks);
    if (final_delta == 0) continue;
    const double spread = tl.vegas.present ? tl.vegas.spread : 0.0;
    for (int m = 0; m < 48; ++m) {
      const Ticks t = m * kTicksPerMinute;
      rows.push_back(WinProbModel::features(tl.delta_at(t), 48.0 - m, spread));
      ys.push_back(final_delta > 0 ? 1.0 : 0.0);
    }
  }
  WinProbModel model;
  if (rows.size() < 20) return model;
  Eigen::MatrixXd X(rows.size(), 4);
  Eigen::VectorXd y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    X.row(i) = rows[i].transpose();
    y[i] = ys[i];
  }
  Eigen::MatrixXd pen = Eigen::MatrixXd::Identity(4, 4) * 1e-3;
  pen(0, 0) = 0;
  try {
    model.beta = fit_logistic(X, y, pen).beta;
    model.fitted = true;
  } catch (const ConvergenceError&) {
    // Separable snapshots (tiny corpora): fall back to the constant model.
  }
  return model;
}

struct CovariateContext {
  const WinProbModel* win_prob = nullptr;
  std::map<std::string, long> season_start;  // season -> first game day
};

inline CovariateContext make_covariate_context(std::span<const GameTimeline> timelines,
                                               const WinProbModel* wp) {
  CovariateContext ctx;
  ctx.win_prob = wp;
  for (const auto& tl : timelines) {
    auto d = days_from_iso(tl.game_date);
    if (!d) continue;
    auto [it, inserted] = ctx.season_start.emplace(tl.season, *d);
    if (!inserted) it->second = std::min(it->second, *d);
  }
  return ctx;
}

// Returns nullopt when the game has no betting lines.
inline std::optional<CovariateVector> extract_covariates(const RunObservation& obs,
                                                         const GameTimeline& tl,
                                                         const CovariateContext& ctx) {
  if (!tl.vegas.present) return std::nullopt;
  CovariateVector c;
  const Side bit = obs.bit_side;
  const int sign = sgn(obs.s);
  c.bit_team = tl.team(bit);
  c.opposing_team = tl.team(other(bit));
  c.run_point_total = std::abs(obs.s);
  c.run_duration = obs.duration_minutes();
  c.time_left = 48.0 - obs.minutes();
  // Δ just before the run started; δ_t sits on the scoring breakpoint itself.
  c.ssd_bor = -sign * (tl.delta_at(obs.t) - obs.s);
  c.ssd_eor = -sign * tl.delta_at(obs.t);
  const auto idx = tl.play_index_at(obs.t);
  c.possession = (idx >= 0 && tl.possession[idx] == bit) ? 1.0 : 0.0;
  c.home = bit == Side::home ? 1.0 : 0.0;
  const double wp_given = idx >= 0 ? tl.win_prob_home[idx] : std::nan("");
  double home_wp;
  if (!std::isnan(wp_given)) home_wp = wp_given;
  else if (ctx.win_prob) home_wp = ctx.win_prob->home_win(tl.delta_at(obs.t), c.time_left, tl.vegas.spread);
  else home_wp = 0.5;
  c.win_probability = bit == Side::home ? home_wp : 1.0 - home_wp;
  c.week_in_season = 1;
  if (auto d = days_from_iso(tl.game_date)) {
    if (auto it = ctx.season_start.find(tl.season); it != ctx.season_start.end())
      c.week_in_season = 1 + (*d - it->second) / 7;
  }
  c.over_under = tl.vegas.over_under;
  c.spread = bit == Side::home ? tl.vegas.spread : -tl.vegas.spread;
  c.moneyline = bit == Side::home ? tl.vegas.moneyline_home : tl.vegas.moneyline_away;
  return c;
}

inline std::vector<Unit> trim_positivity(std::span<const Unit> units, double cutoff = 2400) {
  std::vector<Unit> out;
  for (const auto& u : units)
    if (std::abs(u.cov.moneyline) <= cutoff) out.push_back(u);
  return out;
}

struct FunnelRow {
  std::string step;
  std::size_t total = 0, treated = 0, control = 0;
};

struct ExclusionRecord {
  std::string game_id;
  Ticks t;
  std::string reason;
};

struct UnitBuild {
  std::vector<Unit> units;
  std::vector<ExclusionRecord> exclusions;
  std::vector<FunnelRow> funnel;
};

inline bool bit_timeout_at(const GameTimeline& tl, const RunObservation& o) {
  for (const auto& to : tl.timeouts)
    if (to.t == o.t && to.side == o.bit_side) return true;
  return false;
}

// Runs the unit criteria and the positivity trim; funnel rows mirror the
// data-preparation table (run, uncensored, timeout-free, trimmed).
inline UnitBuild build_units(std::span<const GameTimeline> timelines,
                             std::span<const RunObservation> runs, const CovariateContext& ctx,
                             double moneyline_cutoff = 2400) {
  std::map<std::string, const GameTimeline*> by_id;
  for (const auto& tl : timelines) by_id[tl.game_id] = &tl;
  UnitBuild b;
  FunnelRow run_row{"Play must be a run."}, unc_row{"Windows must be uncensored."},
      to_row{"Windows must exclude a timeout."};
  std::vector<Unit> kept;
  for (const auto& o : runs) {
    auto it = by_id.find(o.game_id);
    if (it == by_id.end()) continue;
    const GameTimeline& tl = *it->second;
    const bool rwt = bit_timeout_at(tl, o);
    ++run_row.total;
    (rwt ? run_row.treated : run_row.control)++;
    const auto cls = classify_play(o, tl);
    if (cls.assignment == Assignment::excluded) {
      b.exclusions.push_back({o.game_id, o.t, cls.reason});
      if (cls.reason != "truncated") {
        ++unc_row.total;
        (rwt ? unc_row.treated : unc_row.control)++;
      }
      continue;
    }
    ++unc_row.total;
    (rwt ? unc_row.treated : unc_row.control)++;
    auto cov = extract_covariates(o, tl, ctx);
    if (!cov) {
      b.exclusions.push_back({o.game_id, o.t, "missing_vegas"});
      continue;
    }
    ++to_row.total;
    (rwt ? to_row.treated : to_row.control)++;
    Unit u;
    u.game_id = o.game_id;
    u.t = o.t;
    u.s = o.s;
    u.window = o.window;
    u.treated = cls.assignment == Assignment::treated;
    u.cov = std::move(*cov);
    u.outcome = outcome_ticks(tl, o.t, o.s);
    kept.push_back(std::move(u));
  }
  FunnelRow trim_row{"Consider moneyline less than cutoff in absolute value."};
  for (const auto& u : kept) {
    if (std::abs(u.cov.moneyline) > moneyline_cutoff) {
      b.exclusions.push_back({u.game_id, u.t, "moneyline_trim"});
      continue;
    }
    b.units.push_back(u);
    ++trim_row.total;
    (u.treated ? trim_row.treated : trim_row.control)++;
  }
  std::sort(b.units.begin(), b.units.end(), [](const Unit& a, const Unit& c) {
    return a.game_id != c.game_id ? a.game_id < c.game_id : a.t < c.t;
  });
  for (std::size_t i = 0; i < b.units.size(); ++i) b.units[i].unit_id = static_cast<int>(i + 1);
  b.funnel = {run_row, unc_row, to_row, trim_row};
  return b;
}

inline void write_units_csv(std::ostream& out, std::span<const Unit> units) {
  csv::Writer w(out);
  std::vector<std::string> header = {"unit_id", "game_id", "t", "period", "treated", "s",
                                     "window", "bit_team", "opposing_team"};
  for (auto name : kNumericCovariates) header.emplace_back(name);
  header.insert(header.end(), {"outcome", "propensity"});
  w.row(header);
  for (const auto& u : units) {
    std::vector<std::string> row = {csv::fmt(u.unit_id), u.game_id, csv::fmt(u.minutes()),
                                    csv::fmt(u.period()), u.treated ? "1" : "0", csv::fmt(u.s),
                                    csv::fmt(to_minutes(u.window)), u.cov.bit_team,
                                    u.cov.opposing_team};
    for (double v : numeric_values(u.cov)) row.push_back(csv::fmt(v));
    row.push_back(csv::fmt(u.outcome));
    row.push_back(csv::fmt(u.propensity));
    w.row(row);
  }
}

inline std::vector<Unit> read_units_csv(std::istream& in) {
  auto tab = csv::read_table(in);
  const auto c_id = tab.require("unit_id"), c_g = tab.require("game_id"), c_t = tab.require("t"),
             c_tr = tab.require("treated"), c_s = tab.require("s"), c_w = tab.require("window"),
             c_bit = tab.require("bit_team"), c_opp = tab.require("opposing_team"),
             c_y = tab.require("outcome");
  auto c_ps = tab.column("propensity");
  std::array<std::size_t, kNumNumeric> c_num{};
  for (std::size_t k = 0; k < kNumNumeric; ++k) c_num[k] = tab.require(kNumericCovariates[k]);
  std::vector<Unit> units;
  units.reserve(tab.rows.size());
  for (const auto& row : tab.rows) {
    Unit u;
    u.unit_id = static_cast<int>(csv::parse_int(row[c_id]).value_or(0));
    u.game_id = row[c_g];
    u.t = to_ticks(csv::parse_double(row[c_t]).value_or(0));
    u.treated = row[c_tr] == "1";
    u.s = static_cast<int>(csv::parse_int(row[c_s]).value_or(0));
    u.window = to_ticks(csv::parse_double(row[c_w]).value_or(2));
    u.cov.bit_team = row[c_bit];
    u.cov.opposing_team = row[c_opp];
    std::array<double, kNumNumeric> v{};
    for (std::size_t k = 0; k < kNumNumeric; ++k) v[k] = csv::parse_double(row[c_num[k]]).value_or(std::nan(""));
    u.cov.run_point_total = v[0];
    u.cov.run_duration = v[1];
    u.cov.time_left = v[2];
    u.cov.win_probability = v[3];
    u.cov.ssd_bor = v[4];
    u.cov.ssd_eor = v[5];
    u.cov.possession = v[6];
    u.cov.home = v[7];
    u.cov.week_in_season = v[8];
    u.cov.over_under = v[9];
    u.cov.spread = v[10];
    u.cov.moneyline = v[11];
    u.outcome = csv::parse_double(row[c_y]).value_or(std::nan(""));
    if (c_ps) u.propensity = csv::parse_double(row[*c_ps]).value_or(std::nan(""));
    units.push_back(std::move(u));
  }
  return units;
}

inline void write_exclusions_csv(std::ostream& out, std::span<const ExclusionRecord> ex) {
  csv::Writer w(out);
  w.row({"game_id", "t", "reason"});
  for (const auto& e : ex) w.row({e.game_id, csv::fmt(to_minutes(e.t)), e.reason});
}

}  // namespace runstop
