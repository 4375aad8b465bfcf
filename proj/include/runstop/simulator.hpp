#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/ingest.hpp"
#include "runstop/logistic.hpp"
#include "runstop/outcome.hpp"
#include "runstop/rng.hpp"
#include "runstop/timeline.hpp"
#include "runstop/units.hpp"

namespace runstop {

struct SimConfig {
  int n_games = 300;
  int n_teams = 10;
  std::string season = "sim";
  std::string start_date = "2030-10-20";

  // Possessions: exponential length, categorical result.
  double possession_minutes = 0.3;
  double p_turnover = 0.14;
  double p_free_throws = 0.08;
  double p_two = 0.32;
  double p_three = 0.05;  // remainder: missed shot
  double p_ft_make = 0.75;
  double p_defensive_rebound = 0.75;

  // Team strength in points per game (sd) and home edge.
  double strength_sd = 4.0;
  double home_edge = 2.5;

  // Bursts: one side's offence runs hot and the other's goes cold.
  double burst_rate = 0.3;  // per minute of game time
  double burst_rate_multiplier = 1.0;
  double burst_minutes = 1.5;  // mean length
  double burst_hot = 0.35;     // added make probability for the bursting side
  double burst_cold = 0.3;     // multiplier on the other side's makes

  // BiT timeout policy at run onsets: logistic in the run covariates.
  bool confounded = true;
  double policy_intercept = 0.5;
  double policy_r = 0.35;         // per point above the threshold
  double policy_duration = -0.6;  // per minute of run duration
  double policy_time_left = 0.8;  // per 48 minutes left
  double policy_ssd = -0.4;       // per 10 points of BiT-signed score difference
  double policy_spread = 0.8;     // per 10 points of BiT-signed spread
  double hidden_confounding = 0.0;  // log-odds shift and outcome bump from an unobserved binary

  double background_timeout_rate = 0.03;  // per team per minute, path independent
  double tau = 0.0;                       // point-minutes added to the BiT outcome by a timeout
  int rho = 9;
  double window = 2.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_games < 1 || n_teams < 2) throw ConfigError("sim needs at least one game and two teams");
    if (!(possession_minutes > 0) || !(burst_minutes > 0)) throw ConfigError("sim rates must be positive");
    if (burst_rate < 0 || burst_rate_multiplier < 0 || background_timeout_rate < 0)
      throw ConfigError("sim rates must be non-negative");
    const double s = p_turnover + p_free_throws + p_two + p_three;
    if (!(s < 1) || p_turnover < 0 || p_free_throws < 0 || p_two < 0 || p_three < 0)
      throw ConfigError("sim possession probabilities must be non-negative and sum below 1");
    if (!std::isfinite(tau)) throw ConfigError("sim.tau must be finite");
    if (rho < 1 || !(window > 0)) throw ConfigError("sim run definition invalid");
  }
};

struct LedgerRow {
  std::string game_id;
  Ticks t = 0;
  Side bit_side = Side::none;
  bool treated = false;
  std::string source;  // policy | background
  double policy_prob = std::nan("");
  double counterfactual_y0 = std::nan("");
  double realized_y = std::nan("");
  double tau = 0;
  bool unit = false;  // passes the unit criteria
};

struct SimResult {
  std::vector<GameEvent> events;
  std::map<std::string, GameInfo> games;
  std::vector<LedgerRow> ledger;
  std::vector<double> strengths;
};

namespace detail {

struct TeamLine {
  double spread, over_under, ml_home, ml_away;
};

inline double american_moneyline(double p) {
  p = std::clamp(p, 0.001, 0.999);
  return p >= 0.5 ? std::round(-100 * p / (1 - p)) : std::round(100 * (1 - p) / p);
}

class GameSim {
 public:
  GameSim(const SimConfig& c, std::string id, Rng& rng, double edge_home)
      : c_(c), id_(std::move(id)), rng_(rng), edge_home_(edge_home) {
    tl_.game_id = id_;
  }

  std::vector<GameEvent> events;
  std::vector<LedgerRow> ledger;
  std::vector<std::pair<Ticks, double>> own_injection;  // parallel to ledger: points-minutes injected
  GameTimeline tl_;
  std::string season, date;
  double spread_home = 0;

  void run() {
    const Ticks W = to_ticks(c_.window);
    window_ = W;
    // Path-independent timeouts, drawn up front.
    for (Side s : {Side::home, Side::away}) {
      double x = 0;
      std::exponential_distribution<double> gap(c_.background_timeout_rate > 0 ? c_.background_timeout_rate : 1.0);
      while (c_.background_timeout_rate > 0) {
        x += gap(rng_);
        const Ticks t = to_ticks(x);
        if (t >= kRegulationTicks) break;
        if (t > 0) pending_.push_back({t, Kind::background_timeout, s, 0});
      }
    }
    Side off = uniform01(rng_) < 0.5 ? Side::home : Side::away;
    const Side first = off;
    for (int p = 1; p <= 4; ++p) {
      Ticks tick = period_start(p);
      off = (p == 1 || p == 4) ? first : other(first);
      emit(tick, p, EventKind::other, off, "Jump Ball");
      std::exponential_distribution<double> dur(1.0 / c_.possession_minutes);
      while (true) {
        const Ticks next = tick + std::max<Ticks>(1, to_ticks(dur(rng_)));
        if (next > period_end(p)) {
          flush_pending(period_end(p), true);
          scan_runs(tick, period_end(p));
          break;
        }
        flush_pending(next, false);
        scan_runs(tick, next - 1);
        maybe_start_burst(tick, next);
        off = play_possession(next, off);
        flush_pending(next, true);
        tick = next;
      }
    }
    finalize();
  }

 private:
  enum class Kind { background_timeout, injection };
  struct Pending {
    Ticks t;
    Kind kind;
    Side side;
    int points;
  };

  const SimConfig& c_;
  std::string id_;
  Rng& rng_;
  double edge_home_;
  Ticks window_ = 1200;
  int home_ = 0, away_ = 0;
  std::vector<Pending> pending_;
  Side burst_side_ = Side::none;
  Ticks burst_end_ = -1;
  Ticks last_run_ = -100000;
  Ticks last_scan_ = -1;
  Ticks burst_start_ = 0;

  int delta() const { return home_ - away_; }

  void emit(Ticks t, int period, EventKind kind, Side team, std::string desc) {
    GameEvent e;
    e.game_id = id_;
    e.season = season;
    e.game_date = date;
    e.period = period;
    e.t = t;
    e.kind = kind;
    e.home_score = home_;
    e.away_score = away_;
    e.team = team;
    e.description = std::move(desc);
    e.row = events.size();
    events.push_back(std::move(e));
  }
  void emit(Ticks t, EventKind kind, Side team, std::string desc) { emit(t, period_of(t), kind, team, std::move(desc)); }

  void score(Ticks t, Side s, int pts) {
    (s == Side::home ? home_ : away_) += pts;
    const int d = delta();
    if (!tl_.breakpoints.empty() && tl_.breakpoints.back().t == t) tl_.breakpoints.back().delta = d;
    else tl_.breakpoints.push_back({t, d});
    const std::size_t n = tl_.breakpoints.size();
    if ((n >= 2 && tl_.breakpoints[n - 2].delta == d) || (n == 1 && d == 0)) tl_.breakpoints.pop_back();
  }

  std::optional<RunStat> run_at(Ticks t) const {
    auto rs = run_stat(tl_, t, window_);
    if (rs && std::abs(rs->change) >= c_.rho) return rs;
    return std::nullopt;
  }

  // Tracks the latest evaluation time (5 s lattice or event) with an active run.
  void scan_runs(Ticks from, Ticks to) {
    Ticks t = std::max<Ticks>(from, last_scan_ + 1);
    t = ((t + 49) / 50) * 50;
    for (; t <= to; t += 50)
      if (run_at(t)) last_run_ = std::max(last_run_, t);
    last_scan_ = std::max(last_scan_, to);
  }

  void note_event_time(Ticks t) {
    if (run_at(t)) last_run_ = std::max(last_run_, t);
  }

  void maybe_start_burst(Ticks tick, Ticks next) {
    if (burst_side_ != Side::none && (tick >= burst_end_ || last_run_ >= burst_start_)) burst_side_ = Side::none;
    if (burst_side_ != Side::none) return;
    if (tick - last_run_ <= kTicksPerMinute || run_at(tick)) return;
    const double rate = c_.burst_rate * c_.burst_rate_multiplier;
    if (rate <= 0) return;
    const double p = 1 - std::exp(-rate * to_minutes(next - tick));
    if (uniform01(rng_) >= p) return;
    burst_side_ = uniform01(rng_) < 0.5 ? Side::home : Side::away;
    std::exponential_distribution<double> len(1.0 / c_.burst_minutes);
    burst_start_ = tick;
    burst_end_ = tick + std::max<Ticks>(1, to_ticks(len(rng_)));
  }

  Side play_possession(Ticks t, Side off) {
    const Side def = other(off);
    const double edge = (off == Side::home ? edge_home_ : -edge_home_);
    // Spread the per-game edge over roughly 80 possessions a side.
    const double shift = edge / (2.0 * 2.1 * 80.0);
    double two = std::clamp(c_.p_two + shift, 0.0, 0.95);
    double three = c_.p_three;
    double tov = c_.p_turnover, fts = c_.p_free_throws;
    const bool bursting = burst_side_ != Side::none && t <= burst_end_;
    if (bursting) {
      if (off == burst_side_) {
        two = std::min(0.9, two + c_.burst_hot * 0.75);
        three = std::min(0.9 - two, three + c_.burst_hot * 0.25);
        tov *= 0.5;
      } else {
        two *= c_.burst_cold;
        three *= c_.burst_cold;
        fts *= c_.burst_cold;
      }
    }
    const double u = uniform01(rng_);
    int scored = 0;
    Side next = off;
    if (u < tov) {
      emit(t, EventKind::turnover, off, "Turnover");
      next = def;
    } else if (u < tov + fts) {
      emit(t, EventKind::foul, def, "Shooting foul");
      bool made_last = false;
      for (int k = 0; k < 2; ++k) {
        made_last = uniform01(rng_) < c_.p_ft_make;
        if (made_last) {
          score(t, off, 1);
          ++scored;
          emit(t, EventKind::free_throw, off, "Free throw " + std::to_string(k + 1) + " of 2");
        } else {
          emit(t, EventKind::free_throw, off, "MISS Free throw " + std::to_string(k + 1) + " of 2");
        }
      }
      if (made_last) next = def;
      else next = rebound(t, off);
    } else if (u < tov + fts + two) {
      score(t, off, 2);
      scored = 2;
      emit(t, EventKind::made_shot, off, "Two point shot");
      next = def;
    } else if (u < tov + fts + two + three) {
      score(t, off, 3);
      scored = 3;
      emit(t, EventKind::made_shot, off, "Three point shot");
      next = def;
    } else {
      emit(t, EventKind::missed_shot, off, "MISS shot");
      next = rebound(t, off);
    }
    if (scored) after_score(t);
    else note_event_time(t);
    return next;
  }

  Side rebound(Ticks t, Side off) {
    const Side who = uniform01(rng_) < c_.p_defensive_rebound ? other(off) : off;
    emit(t, EventKind::rebound, who, who == off ? "Offensive rebound" : "Defensive rebound");
    return who;
  }

  double policy_probability(const RunStat& rs, Ticks t, Side bit) const {
    if (!c_.confounded) return logistic(c_.policy_intercept);
    const int sign = sgn(rs.change);
    const double ssd = -sign * delta();
    const double spread_bit = bit == Side::home ? spread_home : -spread_home;
    const double eta = c_.policy_intercept + c_.policy_r * (std::abs(rs.change) - c_.rho) +
                       c_.policy_duration * to_minutes(rs.duration) +
                       c_.policy_time_left * (48.0 - to_minutes(t)) / 48.0 +
                       c_.policy_ssd * ssd / 10.0 + c_.policy_spread * spread_bit / 10.0;
    return logistic(eta);
  }

  bool post_window_fits(Ticks t) const { return t + kPostWindow <= period_end(period_of(t)); }

  // Adds points for `side` late in (t, t + 1] so that its contribution to the
  // BiT-signed outcome of the unit at t is exactly `amount` point-minutes.
  void inject(Ticks t, Side bit, double amount) {
    if (amount == 0 || !post_window_fits(t)) return;
    const int k = static_cast<int>(std::ceil(std::abs(amount) - 1e-12));
    const Ticks lead = to_ticks(std::abs(amount) / k);
    const Side side = amount > 0 ? bit : other(bit);
    pending_.push_back({t + kPostWindow - lead, Kind::injection, side, k});
  }

  void record_decision(Ticks t, Side bit, bool treated, std::string source, double prob, double injected) {
    LedgerRow r;
    r.game_id = id_;
    r.t = t;
    r.bit_side = bit;
    r.treated = treated;
    r.source = std::move(source);
    r.policy_prob = prob;
    r.tau = c_.tau;
    ledger.push_back(std::move(r));
    own_injection.emplace_back(t, injected);
  }

  void after_score(Ticks t) {
    const auto rs = run_at(t);
    const bool onset = rs && last_run_ < t - kTicksPerMinute;
    if (rs) last_run_ = std::max(last_run_, t);
    if (!onset) return;
    burst_side_ = Side::none;  // the run is on the board, the burst is over
    const Side bit = rs->change > 0 ? Side::away : Side::home;
    double hidden = 0;
    if (c_.hidden_confounding != 0) {
      const bool u = uniform01(rng_) < 0.5;
      hidden = c_.hidden_confounding * (u ? 1.0 : -1.0);
      if (u) {
        // Unobserved advantage for the BiT side: one extra point half-way through the window.
        if (post_window_fits(t)) pending_.push_back({t + kPostWindow / 2, Kind::injection, bit, 1});
      }
    }
    const double prob = std::clamp(logistic(std::log(policy_probability(*rs, t, bit) /
                                                     (1 - policy_probability(*rs, t, bit))) + hidden),
                                   1e-9, 1 - 1e-9);
    const bool call = uniform01(rng_) < prob;
    double injected = 0;
    if (call) {
      emit(t, EventKind::timeout, bit, "Timeout");
      if (post_window_fits(t)) {
        inject(t, bit, c_.tau);
        injected = c_.tau;
      }
    }
    record_decision(t, bit, call, "policy", prob, injected);
  }

  void flush_pending(Ticks upto, bool inclusive) {
    std::sort(pending_.begin(), pending_.end(), [](auto& a, auto& b) { return a.t < b.t; });
    std::size_t i = 0;
    std::vector<Pending> later;
    for (; i < pending_.size(); ++i) {
      const auto p = pending_[i];
      if (inclusive ? p.t > upto : p.t >= upto) break;
      if (p.kind == Kind::injection) {
        score(p.t, p.side, p.points);
        for (int k = 0; k < p.points; ++k)
          emit(p.t, EventKind::free_throw, p.side, "Technical free throw");
        note_event_time(p.t);
      } else {
        emit(p.t, EventKind::timeout, p.side, "Timeout");
        note_event_time(p.t);
        const auto rs = run_at(p.t);
        if (rs) {
          const Side bit = rs->change > 0 ? Side::away : Side::home;
          if (p.side == bit) {
            double injected = 0;
            if (post_window_fits(p.t)) {
              // Schedule after this loop so the new event is sorted in.
              later.push_back({p.t, Kind::background_timeout, bit, -1});
              injected = c_.tau;
            }
            record_decision(p.t, bit, true, "background", std::nan(""), injected);
          }
        }
      }
    }
    pending_.erase(pending_.begin(), pending_.begin() + i);
    for (const auto& l : later) inject(l.t, l.side, c_.tau);
  }

  void finalize() {
    for (const auto& e : events)
      if (e.kind == EventKind::timeout) tl_.timeouts.push_back({e.t, e.team});
    for (std::size_t i = 0; i < ledger.size(); ++i) {
      auto& r = ledger[i];
      if (!post_window_fits(r.t)) continue;
      const auto rs = run_stat(tl_, r.t, window_);
      const int s = rs ? rs->change : (r.bit_side == Side::home ? -1 : 1);
      r.realized_y = outcome_ticks(tl_, r.t, s);
      r.counterfactual_y0 = r.realized_y - own_injection[i].second;
      if (rs && std::abs(rs->change) >= c_.rho) {
        RunObservation o;
        o.game_id = id_;
        o.t = r.t;
        o.duration = rs->duration;
        o.s = rs->change;
        o.window = window_;
        o.bit_side = r.bit_side;
        const auto cls = classify_play(o, tl_);
        r.unit = cls.assignment != Assignment::excluded;
      }
    }
  }
};

}  // namespace detail

inline SimResult simulate_season(const SimConfig& cfg, unsigned jobs = 1) {
  cfg.validate();
  SimResult out;
  Rng teams_rng = make_rng(cfg.seed, "sim.teams");
  std::normal_distribution<double> strength(0.0, cfg.strength_sd);
  std::vector<std::string> names;
  for (int k = 0; k < cfg.n_teams; ++k) {
    names.push_back("T" + std::string(k < 9 ? "0" : "") + std::to_string(k + 1));
    out.strengths.push_back(strength(teams_rng));
  }
  const long day0 = days_from_iso(cfg.start_date).value_or(0);
  const int per_day = std::max(1, cfg.n_teams / 2);
  struct Spec {
    std::string id;
    int home, away;
    std::string date;
  };
  std::vector<Spec> specs;
  for (int g = 0; g < cfg.n_games; ++g) {
    Rng r = make_rng(cfg.seed, "sim.schedule", g);
    std::uniform_int_distribution<int> pick(0, cfg.n_teams - 1);
    const int h = pick(r);
    int a = pick(r);
    while (a == h) a = pick(r);
    char id[32];
    std::snprintf(id, sizeof id, "S%06d", g + 1);
    specs.push_back({id, h, a, iso_from_days(day0 + g / per_day)});
  }
  std::vector<std::vector<GameEvent>> ev(specs.size());
  std::vector<std::vector<LedgerRow>> led(specs.size());
  std::vector<GameInfo> info(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t g) {
    const auto& sp = specs[g];
    Rng r = make_rng(cfg.seed, "sim.game", g);
    const double edge = out.strengths[sp.home] - out.strengths[sp.away] + cfg.home_edge;
    detail::GameSim sim(cfg, sp.id, r, edge);
    sim.season = cfg.season;
    sim.date = sp.date;
    GameInfo gi;
    gi.game_id = sp.id;
    gi.season = cfg.season;
    gi.game_date = sp.date;
    gi.home_team = names[sp.home];
    gi.away_team = names[sp.away];
    gi.vegas.present = true;
    gi.vegas.spread = std::round(edge * 2) / 2;
    Rng line_rng = make_rng(cfg.seed, "sim.lines", g);
    std::normal_distribution<double> ou(205.0, 4.0);
    gi.vegas.over_under = std::round(ou(line_rng) * 2) / 2;
    const double p_home = 0.5 * std::erfc(-edge / (12.0 * std::sqrt(2.0)));
    gi.vegas.moneyline_home = detail::american_moneyline(p_home);
    gi.vegas.moneyline_away = detail::american_moneyline(1 - p_home);
    sim.spread_home = gi.vegas.spread;
    sim.run();
    ev[g] = std::move(sim.events);
    led[g] = std::move(sim.ledger);
    info[g] = gi;
  });
  for (std::size_t g = 0; g < specs.size(); ++g) {
    std::size_t base = out.events.size();
    for (auto& e : ev[g]) {
      e.row += base;
      out.events.push_back(std::move(e));
    }
    out.ledger.insert(out.ledger.end(), led[g].begin(), led[g].end());
    out.games[info[g].game_id] = info[g];
  }
  return out;
}

// Average of (treated-counterfactual minus control-counterfactual) outcome
// over simulated treated decisions that form analysable units.
inline double oracle_att(const SimConfig&, std::span<const LedgerRow> ledger) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : ledger) {
    if (!r.treated || !r.unit || !std::isfinite(r.counterfactual_y0)) continue;
    sum += r.realized_y - r.counterfactual_y0;
    ++n;
  }
  return n ? sum / n : 0.0;
}

inline void write_ledger_csv(std::ostream& out, std::span<const LedgerRow> ledger) {
  csv::Writer w(out);
  w.row({"game_id", "t", "treated", "counterfactual_y0", "realized_y", "tau", "bit_side", "source",
         "policy_prob", "unit"});
  for (const auto& r : ledger)
    w.row({r.game_id, csv::fmt(to_minutes(r.t)), r.treated ? "1" : "0", csv::fmt(r.counterfactual_y0),
           csv::fmt(r.realized_y), csv::fmt(r.tau), std::string(to_string(r.bit_side)), r.source,
           csv::fmt(r.policy_prob), r.unit ? "1" : "0"});
}

}  // namespace runstop
