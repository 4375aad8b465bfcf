#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/ingest.hpp"

namespace runstop {

struct VegasLines {
  double spread = 0;  // expected home score minus away score
  double over_under = 0;
  double moneyline_home = 0;
  double moneyline_away = 0;
  bool present = false;
};

// Per-game metadata not carried by the event stream.
struct GameInfo {
  std::string game_id;
  std::string season;
  std::string game_date;
  std::string home_team;
  std::string away_team;
  VegasLines vegas;
};

struct Breakpoint {
  Ticks t;
  int delta;  // home minus away from t onwards
  friend bool operator==(const Breakpoint&, const Breakpoint&) = default;
};

struct TimeoutMark {
  Ticks t;
  Side side;
};

// Right-continuous score difference for one game, plus the per-play state
// needed downstream (timeouts, possession, optional win probability).
struct GameTimeline {
  std::string game_id;
  std::string home_team;
  std::string away_team;
  std::string season;
  std::string game_date;
  VegasLines vegas;
  std::vector<Breakpoint> breakpoints;
  std::vector<TimeoutMark> timeouts;
  std::vector<Ticks> play_times;
  std::vector<Side> possession;       // parallel to play_times
  std::vector<double> win_prob_home;  // parallel to play_times, NaN if absent

  const std::string& team(Side s) const { return s == Side::home ? home_team : away_team; }

  // Δ(t) on the tick grid; Δ = 0 before the first breakpoint.
  int delta_at(Ticks t) const {
    auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), t,
                               [](Ticks v, const Breakpoint& b) { return v < b.t; });
    return it == breakpoints.begin() ? 0 : std::prev(it)->delta;
  }

  // Index of the last play at or before t, or -1.
  std::ptrdiff_t play_index_at(Ticks t) const {
    auto it = std::upper_bound(play_times.begin(), play_times.end(), t);
    return (it - play_times.begin()) - 1;
  }

  bool is_play_time(Ticks t) const {
    return std::binary_search(play_times.begin(), play_times.end(), t);
  }
};

// Builds a timeline from one game's breakpoints alone (tests, simulator).
inline GameTimeline make_timeline(std::vector<Breakpoint> bps, std::string game_id = "g") {
  GameTimeline tl;
  tl.game_id = std::move(game_id);
  tl.home_team = "HOME";
  tl.away_team = "AWAY";
  std::sort(bps.begin(), bps.end(), [](auto& a, auto& b) { return a.t < b.t; });
  tl.breakpoints = std::move(bps);
  for (const auto& b : tl.breakpoints) {
    tl.play_times.push_back(b.t);
    tl.possession.push_back(Side::none);
    tl.win_prob_home.push_back(std::nan(""));
  }
  return tl;
}

inline std::vector<GameTimeline> build_timelines(std::span<const Play> plays,
                                                 const std::map<std::string, GameInfo>& info) {
  std::vector<GameTimeline> out;
  std::size_t i = 0;
  while (i < plays.size()) {
    GameTimeline tl;
    tl.game_id = plays[i].game_id;
    if (auto it = info.find(tl.game_id); it != info.end()) {
      tl.home_team = it->second.home_team;
      tl.away_team = it->second.away_team;
      tl.season = it->second.season;
      tl.game_date = it->second.game_date;
      tl.vegas = it->second.vegas;
    }
    if (tl.home_team.empty()) tl.home_team = tl.game_id + ":home";
    if (tl.away_team.empty()) tl.away_team = tl.game_id + ":away";
    int prev = 0;
    for (; i < plays.size() && plays[i].game_id == tl.game_id; ++i) {
      const Play& p = plays[i];
      if (!p.has_scores()) continue;
      const int d = *p.home_score - *p.away_score;
      if (d != prev) tl.breakpoints.push_back({p.t, d});
      prev = d;
      if (p.timeout_home) tl.timeouts.push_back({p.t, Side::home});
      if (p.timeout_away) tl.timeouts.push_back({p.t, Side::away});
      tl.play_times.push_back(p.t);
      tl.possession.push_back(p.possession);
      tl.win_prob_home.push_back(p.win_prob_home);
    }
    out.push_back(std::move(tl));
  }
  return out;
}

inline void check_time(double minutes) {
  if (!(minutes >= 0.0 && minutes <= 48.0))
    throw DomainError("game time " + csv::fmt(minutes) + " outside [0, 48]");
}

inline int score_difference(const GameTimeline& tl, double minutes) {
  check_time(minutes);
  return tl.delta_at(to_ticks(minutes));
}

struct RunStat {
  Ticks duration;  // δ_t in ticks, > 0
  int change;      // Δ(t) − Δ(t − δ_t)
};

// Extreme net change of Δ over lookbacks d ∈ (0, W]. The attaining set of d
// is a union of half-open intervals; δ_t is the infimum of the latest one,
// i.e. the time since the first score of the extremal stretch.
inline std::optional<RunStat> run_stat(const GameTimeline& tl, Ticks t, Ticks window) {
  if (window <= 0) throw DomainError("window must be positive");
  const auto& bps = tl.breakpoints;
  const Ticks lo = t - window;
  const int v_t = tl.delta_at(t);
  auto it = std::upper_bound(bps.begin(), bps.end(), lo,
                             [](Ticks v, const Breakpoint& b) { return v < b.t; });
  int value = tl.delta_at(lo);
  int best_abs = -1, best_change = 0;
  Ticks best_d = 0;
  while (true) {
    const Ticks end = (it != bps.end() && it->t < t) ? it->t : t;
    const int change = v_t - value;
    if (std::abs(change) >= best_abs) {
      best_abs = std::abs(change);
      best_change = change;
      best_d = t - end;
    }
    if (end == t) break;
    value = it->delta;
    ++it;
  }
  if (best_abs <= 0) return std::nullopt;
  // Only reachable when the jump at t alone is extremal; the infimum is 0
  // and we report the grid resolution instead.
  return RunStat{std::max<Ticks>(best_d, 1), best_change};
}

inline std::optional<double> run_duration(const GameTimeline& tl, double t, double window) {
  check_time(t);
  auto rs = run_stat(tl, to_ticks(t), to_ticks(window));
  if (!rs) return std::nullopt;
  return to_minutes(rs->duration);
}

inline std::optional<int> signed_run_total(const GameTimeline& tl, double t, int rho = 9,
                                           double window = 2.0) {
  check_time(t);
  auto rs = run_stat(tl, to_ticks(t), to_ticks(window));
  if (!rs || std::abs(rs->change) < rho) return std::nullopt;
  return rs->change;
}

struct RunObservation {
  std::string game_id;
  Ticks t = 0;
  Ticks duration = 0;
  int s = 0;
  int rho = 9;
  Ticks window = 2 * kTicksPerMinute;
  Side bit_side = Side::none;
  std::string bit_team;
  std::string opposing_team;
  bool at_play = false;

  int r() const { return std::abs(s); }
  double minutes() const { return to_minutes(t); }
  double duration_minutes() const { return to_minutes(duration); }
  int period() const { return period_of(t); }
};

struct RunDefinition {
  int rho = 9;
  double window = 2.0;      // minutes
  double grid_step = 5.0;   // seconds
};

// Evaluation times: every play time plus the grid lattice on [0, 48].
inline std::vector<Ticks> evaluation_times(const GameTimeline& tl, Ticks grid_step) {
  std::vector<Ticks> times;
  times.reserve(tl.play_times.size() + kRegulationTicks / std::max<Ticks>(grid_step, 1) + 1);
  for (Ticks t = 0; t <= kRegulationTicks; t += grid_step) times.push_back(t);
  for (Ticks t : tl.play_times)
    if (t >= 0 && t <= kRegulationTicks) times.push_back(t);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  return times;
}

inline std::vector<RunObservation> detect_runs(const GameTimeline& tl, const RunDefinition& def) {
  const Ticks step = static_cast<Ticks>(std::llround(def.grid_step * kTicksPerSecond));
  if (step <= 0) throw DomainError("grid_step must be positive");
  const Ticks window = to_ticks(def.window);
  std::vector<RunObservation> out;
  for (Ticks t : evaluation_times(tl, step)) {
    auto rs = run_stat(tl, t, window);
    if (!rs || std::abs(rs->change) < def.rho) continue;
    RunObservation o;
    o.game_id = tl.game_id;
    o.t = t;
    o.duration = rs->duration;
    o.s = rs->change;
    o.rho = def.rho;
    o.window = window;
    const Side opposing = o.s > 0 ? Side::home : Side::away;
    o.bit_side = other(opposing);
    o.bit_team = tl.team(o.bit_side);
    o.opposing_team = tl.team(opposing);
    o.at_play = tl.is_play_time(t);
    out.push_back(std::move(o));
  }
  return out;
}

inline void write_runs_csv(std::ostream& out, std::span<const RunObservation> runs) {
  csv::Writer w(out);
  w.row({"game_id", "t", "delta_t_run", "s", "r", "bit_team", "opposing_team", "rho", "window"});
  for (const auto& o : runs) {
    w.row({o.game_id, csv::fmt(o.minutes()), csv::fmt(o.duration_minutes()), csv::fmt(o.s),
           csv::fmt(o.r()), o.bit_team, o.opposing_team, csv::fmt(o.rho),
           csv::fmt(to_minutes(o.window))});
  }
}

inline std::vector<RunObservation> read_runs_csv(std::istream& in,
                                                 std::span<const GameTimeline> timelines) {
  std::map<std::string, const GameTimeline*> by_id;
  for (const auto& tl : timelines) by_id[tl.game_id] = &tl;
  auto tab = csv::read_table(in);
  const auto c_g = tab.require("game_id"), c_t = tab.require("t"),
             c_d = tab.require("delta_t_run"), c_s = tab.require("s"),
             c_rho = tab.require("rho"), c_w = tab.require("window");
  const auto c_bit = tab.require("bit_team"), c_opp = tab.require("opposing_team");
  std::vector<RunObservation> out;
  for (const auto& row : tab.rows) {
    RunObservation o;
    o.game_id = row[c_g];
    o.t = to_ticks(csv::parse_double(row[c_t]).value_or(0));
    o.duration = to_ticks(csv::parse_double(row[c_d]).value_or(0));
    o.s = static_cast<int>(csv::parse_int(row[c_s]).value_or(0));
    o.rho = static_cast<int>(csv::parse_int(row[c_rho]).value_or(9));
    o.window = to_ticks(csv::parse_double(row[c_w]).value_or(2));
    o.bit_side = o.s > 0 ? Side::away : Side::home;
    o.bit_team = row[c_bit];
    o.opposing_team = row[c_opp];
    if (auto it = by_id.find(o.game_id); it != by_id.end()) o.at_play = it->second->is_play_time(o.t);
    out.push_back(std::move(o));
  }
  return out;
}

// Days since 1970-01-01 for an ISO date (proleptic Gregorian).
inline std::optional<long> days_from_iso(std::string_view iso) {
  if (iso.size() < 10) return std::nullopt;
  auto y = csv::parse_int(iso.substr(0, 4));
  auto m = csv::parse_int(iso.substr(5, 2));
  auto d = csv::parse_int(iso.substr(8, 2));
  if (!y || !m || !d || *m < 1 || *m > 12 || *d < 1 || *d > 31) return std::nullopt;
  long yy = *y - (*m <= 2);
  const long era = (yy >= 0 ? yy : yy - 399) / 400;
  const long yoe = yy - era * 400;
  const long mp = (*m + 9) % 12;
  const long doy = (153 * mp + 2) / 5 + *d - 1;
  const long doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + doe - 719468;
}

inline std::string iso_from_days(long z) {
  z += 719468;
  const long era = (z >= 0 ? z : z - 146096) / 146097;
  const long doe = z - era * 146097;
  const long yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  long y = yoe + era * 400;
  const long doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const long mp = (5 * doy + 2) / 153;
  const long d = doy - (153 * mp + 2) / 5 + 1;
  const long m = mp < 10 ? mp + 3 : mp - 9;
  y += (m <= 2);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04ld-%02ld-%02ld", y, m, d);
  return buf;
}

// Merges season/date from the events with the vegas/team file.
inline std::map<std::string, GameInfo> read_vegas_csv(std::istream& in) {
  auto tab = csv::read_table(in);
  const auto c_g = tab.require("game_id"), c_h = tab.require("home_team"),
             c_a = tab.require("away_team");
  auto c_sp = tab.column("spread"), c_ou = tab.column("over_under"),
       c_mh = tab.column("moneyline_home"), c_ma = tab.column("moneyline_away");
  auto c_season = tab.column("season"), c_date = tab.column("game_date");
  std::map<std::string, GameInfo> out;
  for (const auto& row : tab.rows) {
    GameInfo g;
    g.game_id = row[c_g];
    g.home_team = row[c_h];
    g.away_team = row[c_a];
    if (c_season) g.season = row[*c_season];
    if (c_date) g.game_date = row[*c_date];
    if (c_sp && c_ou && c_mh && c_ma) {
      auto sp = csv::parse_double(row[*c_sp]), ou = csv::parse_double(row[*c_ou]),
           mh = csv::parse_double(row[*c_mh]), ma = csv::parse_double(row[*c_ma]);
      if (sp && ou && mh && ma) g.vegas = {*sp, *ou, *mh, *ma, true};
    }
    out[g.game_id] = std::move(g);
  }
  return out;
}

// Same columns as the vegas input plus season and game_date.
inline void write_games_csv(std::ostream& out, const std::map<std::string, GameInfo>& games) {
  csv::Writer w(out);
  w.row({"game_id", "home_team", "away_team", "spread", "over_under", "moneyline_home",
         "moneyline_away", "season", "game_date"});
  for (const auto& [id, g] : games) {
    if (g.vegas.present)
      w.row({id, g.home_team, g.away_team, csv::fmt(g.vegas.spread), csv::fmt(g.vegas.over_under),
             csv::fmt(g.vegas.moneyline_home), csv::fmt(g.vegas.moneyline_away), g.season,
             g.game_date});
    else
      w.row({id, g.home_team, g.away_team, "", "", "", "", g.season, g.game_date});
  }
}

inline void attach_event_dates(std::map<std::string, GameInfo>& games,
                               std::span<const GameEvent> events) {
  for (const auto& e : events) {
    auto& g = games[e.game_id];
    if (g.game_id.empty()) g.game_id = e.game_id;
    if (g.season.empty()) g.season = e.season;
    if (g.game_date.empty()) g.game_date = e.game_date;
  }
}

}  // namespace runstop
