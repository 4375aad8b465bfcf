#pragma once

#include <algorithm>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "runstop/common.hpp"
#include "runstop/csv.hpp"

namespace runstop {

enum class EventKind {
  made_shot,
  missed_shot,
  rebound,
  foul,
  free_throw,
  turnover,
  timeout,
  other
};

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::made_shot: return "made_shot";
    case EventKind::missed_shot: return "missed_shot";
    case EventKind::rebound: return "rebound";
    case EventKind::foul: return "foul";
    case EventKind::free_throw: return "free_throw";
    case EventKind::turnover: return "turnover";
    case EventKind::timeout: return "timeout";
    case EventKind::other: return "other";
  }
  return "other";
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
  static constexpr std::pair<std::string_view, EventKind> names[] = {
      {"made_shot", EventKind::made_shot}, {"missed_shot", EventKind::missed_shot},
      {"rebound", EventKind::rebound},     {"foul", EventKind::foul},
      {"free_throw", EventKind::free_throw}, {"turnover", EventKind::turnover},
      {"timeout", EventKind::timeout},     {"other", EventKind::other}};
  for (auto& [n, k] : names)
    if (n == s) return k;
  return std::nullopt;
}

inline std::optional<Side> parse_side(std::string_view s) {
  if (s == "home") return Side::home;
  if (s == "away") return Side::away;
  if (s == "none" || s.empty()) return Side::none;
  return std::nullopt;
}

struct GameEvent {
  std::string game_id;
  std::string season;
  std::string game_date;  // ISO-8601 yyyy-mm-dd
  int period = 1;
  Ticks t = 0;
  EventKind kind = EventKind::other;
  std::optional<int> home_score;
  std::optional<int> away_score;
  Side team = Side::none;
  std::string description;
  std::size_t row = 0;  // source order
  double win_prob_home = std::nan("");

  bool has_scores() const { return home_score && away_score; }
};

// Clock (period + seconds remaining) to absolute game time. Overtime
// periods are five minutes and land past 48.
inline Ticks game_ticks(int period, double clock_seconds_remaining) {
  const Ticks clock = static_cast<Ticks>(std::llround(clock_seconds_remaining * kTicksPerSecond));
  if (period <= 4) return period_start(period) + kPeriodTicks - clock;
  const Ticks ot = 5 * kTicksPerMinute;
  return kRegulationTicks + (period - 5) * ot + ot - clock;
}

inline double clock_seconds_remaining(Ticks t, int period) {
  if (period <= 4) return static_cast<double>(period_end(period) - t) / kTicksPerSecond;
  const Ticks ot = 5 * kTicksPerMinute;
  return static_cast<double>(kRegulationTicks + (period - 4) * ot - t) / kTicksPerSecond;
}

enum class InputFormat { csv, json };

struct RowError {
  std::size_t line;
  std::string message;
};

struct ParseResult {
  std::vector<GameEvent> events;
  std::vector<RowError> errors;
};

namespace detail {

inline const std::vector<std::string>& event_columns() {
  static const std::vector<std::string> cols = {
      "game_id", "season", "game_date", "period", "clock_seconds_remaining",
      "event_kind", "team", "home_score", "away_score", "description"};
  return cols;
}

// Converts one record given as string fields. Returns an error message on a
// bad row.
inline std::optional<std::string> fill_event(
    GameEvent& e, const std::map<std::string, std::string>& f) {
  auto get = [&](const char* k) -> const std::string& { return f.at(k); };
  e.game_id = get("game_id");
  if (e.game_id.empty()) return "empty game_id";
  e.season = get("season");
  e.game_date = get("game_date");
  auto period = csv::parse_int(get("period"));
  if (!period || *period < 1) return "bad period '" + get("period") + "'";
  e.period = static_cast<int>(*period);
  auto clock = csv::parse_double(get("clock_seconds_remaining"));
  if (!clock) return "bad clock_seconds_remaining";
  e.t = game_ticks(e.period, *clock);
  auto kind = parse_event_kind(get("event_kind"));
  e.kind = kind.value_or(EventKind::other);
  auto side = parse_side(get("team"));
  if (!side) return "bad team '" + get("team") + "'";
  e.team = *side;
  for (auto [key, slot] : {std::pair{"home_score", &e.home_score},
                           std::pair{"away_score", &e.away_score}}) {
    const std::string& raw = get(key);
    if (raw.empty() || raw == "NA") continue;  // empty rows are dropped by clean_games
    auto v = csv::parse_int(raw);
    if (!v || *v < 0) return std::string("non-numeric ") + key + " '" + raw + "'";
    *slot = static_cast<int>(*v);
  }
  e.description = get("description");
  if (auto it = f.find("win_prob_home"); it != f.end()) {
    if (auto wp = csv::parse_double(it->second)) e.win_prob_home = *wp;
  }
  return std::nullopt;
}

inline void finish(ParseResult& r, std::size_t n_rows) {
  if (n_rows > 0 && r.errors.size() * 100 > n_rows) {
    throw SchemaError(std::to_string(r.errors.size()) + " of " +
                      std::to_string(n_rows) + " rows unparseable (first at line " +
                      std::to_string(r.errors.front().line) + ": " +
                      r.errors.front().message + ")");
  }
  std::stable_sort(r.events.begin(), r.events.end(), [](const GameEvent& a, const GameEvent& b) {
    if (a.game_id != b.game_id) return a.game_id < b.game_id;
    if (a.period != b.period) return a.period < b.period;
    if (a.t != b.t) return a.t < b.t;
    return a.row < b.row;
  });
}

}  // namespace detail

// Reads events in the documented column schema. Rows that fail to parse are
// collected; more than 1% bad rows is fatal.
inline ParseResult parse_events(std::istream& in, InputFormat format) {
  ParseResult r;
  std::size_t n_rows = 0;
  if (format == InputFormat::csv) {
    csv::Reader reader(in);
    std::vector<std::string> header;
    if (!reader.next(header)) throw SchemaError("missing header");
    if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
    for (const auto& c : detail::event_columns())
      if (std::find(header.begin(), header.end(), c) == header.end())
        throw SchemaError("header lacks column '" + c + "'");
    std::vector<std::string> fields;
    std::map<std::string, std::string> rec;
    while (reader.next(fields)) {
      if (fields.size() == 1 && fields[0].empty()) continue;
      ++n_rows;
      if (fields.size() != header.size()) {
        r.errors.push_back({reader.line(), "expected " + std::to_string(header.size()) +
                                               " fields, got " + std::to_string(fields.size())});
        continue;
      }
      rec.clear();
      for (std::size_t i = 0; i < header.size(); ++i) rec[header[i]] = fields[i];
      GameEvent e;
      e.row = n_rows;
      if (auto err = detail::fill_event(e, rec)) {
        r.errors.push_back({reader.line(), *err});
        continue;
      }
      r.events.push_back(std::move(e));
    }
  } else {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError(std::string("invalid JSON: ") + ex.what());
    }
    if (!doc.is_array()) throw SchemaError("JSON input must be an array of objects");
    std::map<std::string, std::string> rec;
    for (const auto& obj : doc) {
      ++n_rows;
      if (!obj.is_object()) {
        r.errors.push_back({n_rows, "element is not an object"});
        continue;
      }
      rec.clear();
      bool missing = false;
      for (const auto& c : detail::event_columns()) {
        if (!obj.contains(c)) {
          missing = true;
          break;
        }
      }
      if (missing) {
        if (n_rows == 1) throw SchemaError("first JSON object lacks required keys");
        r.errors.push_back({n_rows, "missing keys"});
        continue;
      }
      for (auto it = obj.begin(); it != obj.end(); ++it) {
        const auto& v = it.value();
        if (v.is_string()) rec[it.key()] = v.get<std::string>();
        else if (v.is_null()) rec[it.key()] = "";
        else if (v.is_number_integer()) rec[it.key()] = std::to_string(v.get<long long>());
        else if (v.is_number()) rec[it.key()] = csv::fmt(v.get<double>());
        else rec[it.key()] = v.dump();
      }
      GameEvent e;
      e.row = n_rows;
      if (auto err = detail::fill_event(e, rec)) {
        r.errors.push_back({n_rows, *err});
        continue;
      }
      r.events.push_back(std::move(e));
    }
  }
  detail::finish(r, n_rows);
  return r;
}

inline void write_events_csv(std::ostream& out, std::span<const GameEvent> events) {
  csv::Writer w(out);
  auto cols = detail::event_columns();
  cols.push_back("win_prob_home");
  w.row(cols);
  for (const auto& e : events) {
    w.row({e.game_id, e.season, e.game_date, csv::fmt(e.period),
           csv::fmt(clock_seconds_remaining(e.t, e.period)), std::string(to_string(e.kind)),
           std::string(to_string(e.team)),
           e.home_score ? csv::fmt(*e.home_score) : std::string(),
           e.away_score ? csv::fmt(*e.away_score) : std::string(), e.description,
           std::isnan(e.win_prob_home) ? std::string() : csv::fmt(e.win_prob_home)});
  }
}

struct Play {
  std::string game_id;
  int period = 1;
  Ticks t = 0;
  std::optional<int> home_score;
  std::optional<int> away_score;
  bool timeout_home = false;
  bool timeout_away = false;
  bool is_score_change = false;
  Side possession = Side::none;  // side holding the ball after this play
  double win_prob_home = std::nan("");

  bool has_scores() const { return home_score && away_score; }
  double minutes() const { return to_minutes(t); }

  friend bool operator==(const Play& a, const Play& b) {
    auto same_nan = [](double x, double y) {
      return (std::isnan(x) && std::isnan(y)) || x == y;
    };
    return a.game_id == b.game_id && a.period == b.period && a.t == b.t &&
           a.home_score == b.home_score && a.away_score == b.away_score &&
           a.timeout_home == b.timeout_home && a.timeout_away == b.timeout_away &&
           a.is_score_change == b.is_score_change && a.possession == b.possession &&
           same_nan(a.win_prob_home, b.win_prob_home);
  }
};

namespace detail {

inline bool is_technical(std::string_view description) {
  return description.find("Technical") != std::string_view::npos ||
         description.find("technical") != std::string_view::npos;
}

// Possession after an event. Made baskets and made free throws hand the
// inbound to the other side; rebounds go to the rebounder; technical free
// throws leave possession alone.
inline Side possession_after(const GameEvent& e, Side current, bool scored) {
  switch (e.kind) {
    case EventKind::made_shot:
      return e.team == Side::none ? current : other(e.team);
    case EventKind::free_throw:
      if (is_technical(e.description) || e.team == Side::none) return current;
      return scored ? other(e.team) : current;
    case EventKind::rebound:
      return e.team == Side::none ? current : e.team;
    case EventKind::turnover:
      return e.team == Side::none ? current : other(e.team);
    case EventKind::other:
      if (e.team != Side::none && e.description.find("Jump Ball") != std::string::npos)
        return e.team;
      return current;
    default:
      return current;
  }
}

}  // namespace detail

// One Play per (game, timestamp). Within a group the score is taken from the
// last event that changed the score, else from the last event with scores.
inline std::vector<Play> collapse_plays(std::span<const GameEvent> events) {
  std::vector<Play> plays;
  std::size_t i = 0;
  std::string current_game;
  int run_home = 0, run_away = 0;
  Side poss = Side::none;
  while (i < events.size()) {
    const GameEvent& first = events[i];
    if (first.game_id != current_game) {
      current_game = first.game_id;
      run_home = run_away = 0;
      poss = Side::none;
    }
    Play p;
    p.game_id = first.game_id;
    p.t = first.t;
    p.period = first.period > 4 ? first.period : period_of(first.t);
    const GameEvent* last_scoring = nullptr;
    const GameEvent* last_scored_row = nullptr;
    std::size_t j = i;
    for (; j < events.size() && events[j].game_id == first.game_id && events[j].t == first.t; ++j) {
      const GameEvent& e = events[j];
      p.period = std::min(p.period, e.period > 4 ? e.period : period_of(e.t));
      bool scored = false;
      if (e.has_scores()) {
        scored = *e.home_score != run_home || *e.away_score != run_away;
        if (scored) last_scoring = &e;
        last_scored_row = &e;
        run_home = *e.home_score;
        run_away = *e.away_score;
      }
      if (e.kind == EventKind::timeout) {
        if (e.team == Side::home) p.timeout_home = true;
        if (e.team == Side::away) p.timeout_away = true;
      }
      poss = detail::possession_after(e, poss, scored);
      if (!std::isnan(e.win_prob_home)) p.win_prob_home = e.win_prob_home;
    }
    const GameEvent* src = last_scoring ? last_scoring : last_scored_row;
    if (src) {
      p.home_score = src->home_score;
      p.away_score = src->away_score;
    }
    p.possession = poss;
    plays.push_back(std::move(p));
    i = j;
  }
  // Score-change flags against the previous play with scores in the game.
  std::string g;
  int ph = 0, pa = 0;
  for (auto& p : plays) {
    if (p.game_id != g) {
      g = p.game_id;
      ph = pa = 0;
    }
    if (p.has_scores()) {
      p.is_score_change = *p.home_score != ph || *p.away_score != pa;
      ph = *p.home_score;
      pa = *p.away_score;
    }
  }
  return plays;
}

// Re-collapses already collapsed plays (merging any duplicate timestamps
// with the same rule). Identity on the output of collapse_plays(events).
inline std::vector<Play> collapse_plays(std::span<const Play> plays) {
  std::vector<Play> out;
  for (const auto& p : plays) {
    if (!out.empty() && out.back().game_id == p.game_id && out.back().t == p.t) {
      Play& q = out.back();
      q.timeout_home = q.timeout_home || p.timeout_home;
      q.timeout_away = q.timeout_away || p.timeout_away;
      if (p.has_scores() && (p.is_score_change || !q.is_score_change)) {
        q.home_score = p.home_score;
        q.away_score = p.away_score;
      }
      q.is_score_change = q.is_score_change || p.is_score_change;
      q.possession = p.possession;
      if (!std::isnan(p.win_prob_home)) q.win_prob_home = p.win_prob_home;
      q.period = std::min(q.period, p.period);
    } else {
      out.push_back(p);
    }
  }
  return out;
}

struct Removal {
  std::string game_id;
  std::string reason;
};

struct CleanResult {
  std::vector<Play> plays;
  std::vector<Removal> ledger;
};

// Largest legal single-play change per side: a three plus an and-one or a
// technical free throw.
inline constexpr int kMaxPlayScoreJump = 4;

inline CleanResult clean_games(std::span<const Play> plays) {
  CleanResult r;
  std::size_t i = 0;
  while (i < plays.size()) {
    std::size_t j = i;
    while (j < plays.size() && plays[j].game_id == plays[i].game_id) ++j;
    const std::string& gid = plays[i].game_id;
    std::vector<Play> kept;
    std::size_t empty_rows = 0, overtime = 0;
    for (std::size_t k = i; k < j; ++k) {
      if (!plays[k].has_scores()) {
        ++empty_rows;
        continue;
      }
      if (plays[k].period > 4) {
        ++overtime;
        continue;
      }
      kept.push_back(plays[k]);
    }
    if (empty_rows) r.ledger.push_back({gid, "empty_rows:" + std::to_string(empty_rows)});
    if (overtime) r.ledger.push_back({gid, "overtime_plays:" + std::to_string(overtime)});
    std::string bad;
    int ph = 0, pa = 0;
    for (const auto& p : kept) {
      const int dh = *p.home_score - ph, da = *p.away_score - pa;
      if (dh < 0 || da < 0) {
        bad = "misreported:score_decrease";
        break;
      }
      if (dh > kMaxPlayScoreJump || da > kMaxPlayScoreJump) {
        bad = "misreported:score_jump";
        break;
      }
      ph = *p.home_score;
      pa = *p.away_score;
    }
    if (!bad.empty()) {
      r.ledger.push_back({gid, bad});
    } else {
      // Recompute change flags over the surviving rows.
      ph = pa = 0;
      for (auto& p : kept) {
        p.is_score_change = *p.home_score != ph || *p.away_score != pa;
        ph = *p.home_score;
        pa = *p.away_score;
        r.plays.push_back(std::move(p));
      }
    }
    i = j;
  }
  return r;
}

inline void write_removals_csv(std::ostream& out, std::span<const Removal> ledger) {
  csv::Writer w(out);
  w.row({"game_id", "reason"});
  for (const auto& r : ledger) w.row({r.game_id, r.reason});
}

inline void write_plays_csv(std::ostream& out, std::span<const Play> plays) {
  csv::Writer w(out);
  w.row({"game_id", "period", "t", "home_score", "away_score", "timeout_home", "timeout_away",
         "is_score_change", "possession", "win_prob_home"});
  for (const auto& p : plays) {
    w.row({p.game_id, csv::fmt(p.period), csv::fmt(static_cast<long long>(p.t)),
           p.home_score ? csv::fmt(*p.home_score) : "", p.away_score ? csv::fmt(*p.away_score) : "",
           p.timeout_home ? "1" : "0", p.timeout_away ? "1" : "0", p.is_score_change ? "1" : "0",
           std::string(to_string(p.possession)),
           std::isnan(p.win_prob_home) ? "" : csv::fmt(p.win_prob_home)});
  }
}

// The plays CSV stores t in ticks (tenths of a second) so it round-trips exactly.
inline std::vector<Play> read_plays_csv(std::istream& in) {
  auto tab = csv::read_table(in);
  const auto c_game = tab.require("game_id"), c_period = tab.require("period"),
             c_t = tab.require("t"), c_h = tab.require("home_score"),
             c_a = tab.require("away_score"), c_th = tab.require("timeout_home"),
             c_ta = tab.require("timeout_away"), c_sc = tab.require("is_score_change"),
             c_pos = tab.require("possession"), c_wp = tab.require("win_prob_home");
  std::vector<Play> plays;
  plays.reserve(tab.rows.size());
  for (const auto& row : tab.rows) {
    Play p;
    p.game_id = row[c_game];
    p.period = static_cast<int>(csv::parse_int(row[c_period]).value_or(1));
    p.t = static_cast<Ticks>(csv::parse_int(row[c_t]).value_or(0));
    if (auto h = csv::parse_int(row[c_h])) p.home_score = static_cast<int>(*h);
    if (auto a = csv::parse_int(row[c_a])) p.away_score = static_cast<int>(*a);
    p.timeout_home = row[c_th] == "1";
    p.timeout_away = row[c_ta] == "1";
    p.is_score_change = row[c_sc] == "1";
    p.possession = parse_side(row[c_pos]).value_or(Side::none);
    if (auto wp = csv::parse_double(row[c_wp])) p.win_prob_home = *wp;
    plays.push_back(std::move(p));
  }
  return plays;
}

}  // namespace runstop
