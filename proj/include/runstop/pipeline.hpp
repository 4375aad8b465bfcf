#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "runstop/balance.hpp"
#include "runstop/common.hpp"
#include "runstop/csv.hpp"
#include "runstop/effects.hpp"
#include "runstop/ingest.hpp"
#include "runstop/matching.hpp"
#include "runstop/outcome.hpp"
#include "runstop/propensity.hpp"
#include "runstop/rng.hpp"
#include "runstop/sensitivity.hpp"
#include "runstop/simulator.hpp"
#include "runstop/svg.hpp"
#include "runstop/timeline.hpp"
#include "runstop/units.hpp"

namespace runstop {

inline constexpr const char* kVersion = "1.0.0";

struct PipelineConfig {
  std::string events_path;
  std::string vegas_path;
  std::string output_dir = "runstop_out";
  RunDefinition run;
  double moneyline_cutoff = 2400;
  PropensityOptions propensity;
  int cv_splits = 1000;
  double cv_train_fraction = 0.7;
  MatchConfig match;
  bool match_seed_set = false;
  int balance_bootstrap = 2000;
  int effects_bootstrap = 10000;
  int effects_permutations = 100000;
  double fdr_q = 0.05;
  double gamma_max = 3.0;
  double gamma_grid_step = 0.05;
  double gamma_step = 0.01;
  double gamma_cap = 20.0;
  bool sweep = true;
  std::vector<int> sweep_rho = {7, 8, 9, 10};
  std::vector<double> sweep_window = {1.5, 2.0, 2.5, 3.0};
  int variability_seeds = 20;
  SimConfig sim;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::string profile = "desk";

  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }

  MatchConfig match_config() const {
    MatchConfig m = match;
    if (!match_seed_set) m.seed = stage_seed("match");
    m.jobs = jobs;
    return m;
  }

  PropensityOptions propensity_options() const {
    PropensityOptions p = propensity;
    p.seed = stage_seed("propensity");
    return p;
  }

  std::vector<double> gammas() const {
    std::vector<double> g;
    for (int k = 0; 1 + k * gamma_grid_step <= gamma_max + 1e-12; ++k) g.push_back(1 + k * gamma_grid_step);
    return g;
  }

  void validate() const {
    if (run.rho < 1) throw ConfigError("run.rho must be at least 1");
    if (!(run.window > 0)) throw ConfigError("run.window must be positive");
    if (!(run.grid_step > 0)) throw ConfigError("run.grid_step must be positive");
    if (propensity.knots < 1) throw ConfigError("propensity.knots must be positive");
    if (cv_splits < 1) throw ConfigError("propensity.cv_splits must be positive");
    if (!(fdr_q > 0 && fdr_q < 1)) throw ConfigError("effects.fdr_q must lie in (0, 1)");
    if (balance_bootstrap < 100) throw ConfigError("balance.bootstrap must be at least 100");
    if (effects_bootstrap < 1 || effects_permutations < 1) throw ConfigError("effects replicate counts must be positive");
    if (!(gamma_max >= 1) || !(gamma_grid_step > 0) || !(gamma_step > 0)) throw ConfigError("sensitivity grid invalid");
    match.validate();
    sim.validate();
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  auto d = csv::parse_double(v);
  if (!d) throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
  return *d;
}

inline long long to_int(const std::string& key, const std::string& v) {
  auto d = csv::parse_int(v);
  if (!d) throw ConfigError("config key " + key + ": expected an integer, got '" + v + "'");
  return *d;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F conv) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(conv(key, trim(item))));
  if (out.empty()) throw ConfigError("config key " + key + ": empty list");
  return out;
}

}  // namespace detail

inline void apply_profile(PipelineConfig& c, const std::string& profile) {
  if (profile == "desk") {
    const auto seed = c.match.seed;
    const auto budget = c.match.time_budget_seconds;
    c.match = MatchConfig::desk();
    c.match.seed = seed;
    c.match.time_budget_seconds = budget;
  } else if (profile == "paper") {
    const auto seed = c.match.seed;
    const auto budget = c.match.time_budget_seconds;
    c.match = MatchConfig::paper();
    c.match.seed = seed;
    c.match.time_budget_seconds = budget;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
  }
  c.profile = profile;
}

inline void set_config_value(PipelineConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  static const std::map<std::string, std::function<void(PipelineConfig&, const std::string&, const std::string&)>>
      setters = {
          {"paths.events", [](auto& c, auto&, auto& v) { c.events_path = v; }},
          {"paths.vegas", [](auto& c, auto&, auto& v) { c.vegas_path = v; }},
          {"paths.output", [](auto& c, auto&, auto& v) { c.output_dir = v; }},
          {"seed", [](auto& c, auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
          {"jobs", [](auto& c, auto& k, auto& v) { c.jobs = static_cast<unsigned>(std::max<long long>(1, to_int(k, v))); }},
          {"profile", [](auto& c, auto&, auto& v) { apply_profile(c, v); }},
          {"run.rho", [](auto& c, auto& k, auto& v) { c.run.rho = static_cast<int>(to_int(k, v)); }},
          {"run.window", [](auto& c, auto& k, auto& v) { c.run.window = to_double(k, v); }},
          {"run.grid_step", [](auto& c, auto& k, auto& v) { c.run.grid_step = to_double(k, v); }},
          {"units.moneyline_cutoff", [](auto& c, auto& k, auto& v) { c.moneyline_cutoff = to_double(k, v); }},
          {"propensity.knots", [](auto& c, auto& k, auto& v) { c.propensity.knots = static_cast<int>(to_int(k, v)); }},
          {"propensity.lambda_grid", [](auto& c, auto& k, auto& v) { c.propensity.lambda_grid = to_list<double>(k, v, to_double); }},
          {"propensity.lambda", [](auto& c, auto& k, auto& v) { c.propensity.lambda = to_double(k, v); }},
          {"propensity.cv_folds", [](auto& c, auto& k, auto& v) { c.propensity.cv_folds = static_cast<int>(to_int(k, v)); }},
          {"propensity.cv_splits", [](auto& c, auto& k, auto& v) { c.cv_splits = static_cast<int>(to_int(k, v)); }},
          {"propensity.splines", [](auto& c, auto& k, auto& v) { c.propensity.splines = to_bool(k, v); }},
          {"match.population", [](auto& c, auto& k, auto& v) { c.match.population_size = static_cast<int>(to_int(k, v)); }},
          {"match.wait_generations", [](auto& c, auto& k, auto& v) { c.match.wait_generations = static_cast<int>(to_int(k, v)); }},
          {"match.max_generations", [](auto& c, auto& k, auto& v) { c.match.max_generations = static_cast<int>(to_int(k, v)); }},
          {"match.tolerance", [](auto& c, auto& k, auto& v) { c.match.distance_tolerance = to_double(k, v); }},
          {"match.seed", [](auto& c, auto& k, auto& v) { c.match.seed = static_cast<std::uint64_t>(to_int(k, v)); c.match_seed_set = true; }},
          {"match.time_budget", [](auto& c, auto& k, auto& v) { c.match.time_budget_seconds = to_double(k, v); }},
          {"balance.bootstrap", [](auto& c, auto& k, auto& v) { c.balance_bootstrap = static_cast<int>(to_int(k, v)); }},
          {"effects.bootstrap", [](auto& c, auto& k, auto& v) { c.effects_bootstrap = static_cast<int>(to_int(k, v)); }},
          {"effects.permutations", [](auto& c, auto& k, auto& v) { c.effects_permutations = static_cast<int>(to_int(k, v)); }},
          {"effects.fdr_q", [](auto& c, auto& k, auto& v) { c.fdr_q = to_double(k, v); }},
          {"sensitivity.gamma_max", [](auto& c, auto& k, auto& v) { c.gamma_max = to_double(k, v); }},
          {"sensitivity.gamma_grid_step", [](auto& c, auto& k, auto& v) { c.gamma_grid_step = to_double(k, v); }},
          {"sensitivity.gamma_step", [](auto& c, auto& k, auto& v) { c.gamma_step = to_double(k, v); }},
          {"sensitivity.gamma_cap", [](auto& c, auto& k, auto& v) { c.gamma_cap = to_double(k, v); }},
          {"sensitivity.sweep", [](auto& c, auto& k, auto& v) { c.sweep = to_bool(k, v); }},
          {"sweep.rho", [](auto& c, auto& k, auto& v) { c.sweep_rho = to_list<int>(k, v, to_int); }},
          {"sweep.window", [](auto& c, auto& k, auto& v) { c.sweep_window = to_list<double>(k, v, to_double); }},
          {"report.seeds", [](auto& c, auto& k, auto& v) { c.variability_seeds = static_cast<int>(to_int(k, v)); }},
          {"sim.n_games", [](auto& c, auto& k, auto& v) { c.sim.n_games = static_cast<int>(to_int(k, v)); }},
          {"sim.n_teams", [](auto& c, auto& k, auto& v) { c.sim.n_teams = static_cast<int>(to_int(k, v)); }},
          {"sim.tau", [](auto& c, auto& k, auto& v) { c.sim.tau = to_double(k, v); }},
          {"sim.confounded", [](auto& c, auto& k, auto& v) { c.sim.confounded = to_bool(k, v); }},
          {"sim.burst_rate", [](auto& c, auto& k, auto& v) { c.sim.burst_rate = to_double(k, v); }},
          {"sim.burst_rate_multiplier", [](auto& c, auto& k, auto& v) { c.sim.burst_rate_multiplier = to_double(k, v); }},
          {"sim.burst_minutes", [](auto& c, auto& k, auto& v) { c.sim.burst_minutes = to_double(k, v); }},
          {"sim.possession_minutes", [](auto& c, auto& k, auto& v) { c.sim.possession_minutes = to_double(k, v); }},
          {"sim.hidden_confounding", [](auto& c, auto& k, auto& v) { c.sim.hidden_confounding = to_double(k, v); }},
          {"sim.background_timeout_rate", [](auto& c, auto& k, auto& v) { c.sim.background_timeout_rate = to_double(k, v); }},
          {"sim.policy_intercept", [](auto& c, auto& k, auto& v) { c.sim.policy_intercept = to_double(k, v); }},
          {"sim.seed", [](auto& c, auto& k, auto& v) { c.sim.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(c, key, v);
}

// Flat "dotted.key = value" lines; '#' starts a comment. OUTPUT_DIR in the
// environment overrides paths.output.
inline PipelineConfig parse_config(std::istream& in) {
  PipelineConfig c;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  if (const char* od = std::getenv("OUTPUT_DIR"); od && *od) c.output_dir = od;
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  if (path.empty()) {
    std::istringstream empty;
    return parse_config(empty);
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  return parse_config(in);
}

// ---------------------------------------------------------------------------
// In-memory analysis core, shared by the stages, the sweep and the simulator
// recovery checks.

struct Corpus {
  std::vector<GameTimeline> timelines;
  std::map<std::string, GameInfo> games;
  WinProbModel win_prob;
  std::size_t n_events = 0, n_plays = 0, n_clean_plays = 0;
  std::vector<Removal> removals;
};

inline Corpus corpus_from_plays(std::vector<Play> plays, std::map<std::string, GameInfo> games) {
  Corpus c;
  c.games = std::move(games);
  c.timelines = build_timelines(plays, c.games);
  c.win_prob = fit_win_prob(c.timelines);
  return c;
}

inline Corpus corpus_from_events(std::span<const GameEvent> events, std::map<std::string, GameInfo> games) {
  attach_event_dates(games, events);
  auto plays = collapse_plays(events);
  const std::size_t n_plays = plays.size();
  auto cleaned = clean_games(plays);
  Corpus c = corpus_from_plays(std::move(cleaned.plays), std::move(games));
  c.n_events = events.size();
  c.n_plays = n_plays;
  for (const auto& tl : c.timelines) c.n_clean_plays += tl.play_times.size();
  c.removals = std::move(cleaned.ledger);
  return c;
}

inline std::vector<RunObservation> detect_all_runs(std::span<const GameTimeline> timelines,
                                                   const RunDefinition& def, unsigned jobs = 1) {
  std::vector<std::vector<RunObservation>> per(timelines.size());
  parallel_for(timelines.size(), jobs, [&](std::size_t g) { per[g] = detect_runs(timelines[g], def); });
  std::vector<RunObservation> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

struct Analysis {
  RunDefinition def;
  std::vector<RunObservation> runs;
  UnitBuild build;
  std::vector<Unit> units;  // with propensity
  PropensityModel model;
  bool propensity_fallback = false;
  MatchData data;
  MatchedCohort cohort;
  EffectEstimate effect;
  double naive = 0;
  std::vector<double> outcomes;
  std::vector<double> diffs;
};

inline std::vector<double> outcomes_of(std::span<const Unit> units) {
  std::vector<double> y;
  y.reserve(units.size());
  for (const auto& u : units) y.push_back(u.outcome);
  return y;
}

// Fits the propensity model; on convergence failure falls back to a linear
// additive model and reports the fallback.
inline PropensityModel fit_propensity_or_fallback(std::span<const Unit> units, const PropensityOptions& opt,
                                                  bool& fallback) {
  fallback = false;
  try {
    return fit_propensity(units, opt);
  } catch (const ConvergenceError&) {
    fallback = true;
    PropensityOptions lin = opt;
    lin.splines = false;
    return fit_propensity(units, lin);
  }
}

inline void attach_propensity(std::vector<Unit>& units, const PropensityModel& m) {
  const auto p = m.predict(units);
  for (std::size_t i = 0; i < units.size(); ++i) units[i].propensity = p[i];
}

inline EffectEstimate estimate_from(const MatchData& d, const MatchedCohort& c, std::span<const Unit> units) {
  const auto y = outcomes_of(units);
  return att(d, c, y);
}

inline Analysis analyze(const Corpus& corpus, const PipelineConfig& cfg, const RunDefinition& def,
                        const MatchConfig& mcfg) {
  Analysis a;
  a.def = def;
  a.runs = detect_all_runs(corpus.timelines, def, cfg.jobs);
  const auto ctx = make_covariate_context(corpus.timelines, &corpus.win_prob);
  a.build = build_units(corpus.timelines, a.runs, ctx, cfg.moneyline_cutoff);
  a.units = a.build.units;
  a.model = fit_propensity_or_fallback(a.units, cfg.propensity_options(), a.propensity_fallback);
  attach_propensity(a.units, a.model);
  a.data = match_data(a.units);
  a.cohort = genetic_search(a.data, mcfg);
  a.outcomes = outcomes_of(a.units);
  a.effect = att(a.data, a.cohort, a.outcomes);
  a.diffs = pair_differences(a.cohort.pairs, a.outcomes);
  a.naive = naive_diff(a.units);
  return a;
}

struct SweepCell {
  int rho = 9;
  double window = 2.0;
  std::size_t n_units = 0, n_treated = 0, n_control = 0;
  double att = std::nan(""), se = std::nan(""), p = std::nan("");
  bool relaxed_match = false;
  bool propensity_nonconvergence = false;
  std::string error;
};

inline std::vector<SweepCell> run_definition_sweep(const Corpus& corpus, const PipelineConfig& cfg) {
  std::vector<SweepCell> cells;
  for (int rho : cfg.sweep_rho)
    for (double w : cfg.sweep_window) {
      SweepCell c;
      c.rho = rho;
      c.window = w;
      cells.push_back(c);
    }
  PipelineConfig inner = cfg;
  inner.jobs = 1;
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t k) {
    auto& cell = cells[k];
    RunDefinition def = cfg.run;
    def.rho = cell.rho;
    def.window = cell.window;
    MatchConfig m = inner.match_config();
    m.seed = derive_seed(m.seed, "sweep", k);
    try {
      const auto runs = detect_all_runs(corpus.timelines, def);
      const auto ctx = make_covariate_context(corpus.timelines, &corpus.win_prob);
      auto build = build_units(corpus.timelines, runs, ctx, cfg.moneyline_cutoff);
      auto units = build.units;
      for (const auto& u : units) (u.treated ? cell.n_treated : cell.n_control)++;
      cell.n_units = units.size();
      bool fallback = false;
      auto model = fit_propensity_or_fallback(units, inner.propensity_options(), fallback);
      cell.propensity_nonconvergence = fallback;
      attach_propensity(units, model);
      const auto d = match_data(units);
      const auto c = genetic_search(d, m);
      cell.relaxed_match = c.budget_exceeded || cfg.profile != "paper";
      const auto e = estimate_from(d, c, units);
      cell.att = e.att;
      cell.se = e.se;
      cell.p = e.p_value;
    } catch (const ConvergenceError& ex) {
      cell.propensity_nonconvergence = true;
      cell.error = ex.what();
    } catch (const Error& ex) {
      cell.error = ex.what();
    }
  });
  return cells;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepCell> cells) {
  csv::Writer w(out);
  w.row({"rho", "window", "n_units", "n_treated", "n_control", "att", "se", "p", "relaxed_match",
         "propensity_nonconvergence", "error"});
  for (const auto& c : cells)
    w.row({csv::fmt(c.rho), csv::fmt(c.window), csv::fmt(c.n_units), csv::fmt(c.n_treated),
           csv::fmt(c.n_control), csv::fmt(c.att), csv::fmt(c.se), csv::fmt(c.p),
           c.relaxed_match ? "1" : "0", c.propensity_nonconvergence ? "1" : "0", c.error});
}

struct SeedRow {
  std::uint64_t seed;
  double att, se;
};

// Re-runs the genetic search from several seeds on a fixed unit table.
inline std::vector<SeedRow> matching_variability(const MatchData& d, std::span<const Unit> units,
                                                 const MatchConfig& base, int n_seeds) {
  std::vector<SeedRow> rows(n_seeds);
  MatchConfig m = base;
  const unsigned jobs = m.jobs;
  m.jobs = 1;
  parallel_for(static_cast<std::size_t>(n_seeds), jobs, [&](std::size_t k) {
    MatchConfig mk = m;
    mk.seed = derive_seed(base.seed, "variability", k);
    const auto c = genetic_search(d, mk);
    const auto e = estimate_from(d, c, units);
    rows[k] = {mk.seed, e.att, e.se};
  });
  return rows;
}

// Per-period treated and control counts (quarters 1 to 4).
inline std::vector<std::array<std::size_t, 2>> period_counts(std::span<const Unit> units) {
  std::vector<std::array<std::size_t, 2>> c(4, {0, 0});
  for (const auto& u : units) {
    const int p = u.period();
    if (p >= 1 && p <= 4) c[p - 1][u.treated ? 0 : 1]++;
  }
  return c;
}

// ---------------------------------------------------------------------------
// File-backed stages.

enum class Stage { ingest, runs, units, propensity, match, effects, sensitivity, sweep, simulate, report };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
  static const std::vector<std::pair<std::string, Stage>> v = {
      {"ingest", Stage::ingest},           {"detect-runs", Stage::runs},
      {"build-units", Stage::units},       {"fit-propensity", Stage::propensity},
      {"match", Stage::match},             {"estimate", Stage::effects},
      {"sensitivity", Stage::sensitivity}, {"sweep", Stage::sweep},
      {"simulate", Stage::simulate},       {"report", Stage::report}};
  return v;
}

inline std::string stage_command(Stage s) {
  for (const auto& [n, st] : stage_names())
    if (st == s) return n;
  return "?";
}

class Workspace {
 public:
  explicit Workspace(const PipelineConfig& cfg) : cfg_(cfg), dir_(cfg.output_dir) {
    std::filesystem::create_directories(dir_);
  }

  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  // Opens an artifact produced by `producer`, or fails naming that stage.
  std::ifstream open(const std::string& name, Stage producer) const {
    std::ifstream in(path(name));
    if (!in)
      throw DependencyError("missing artifact " + path(name).string() + "; run stage '" +
                            stage_command(producer) + "' first",
                            stage_command(producer));
    return in;
  }

  void write(const std::string& name, const std::string& content) const {
    const auto p = path(name);
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << content;
  }

  template <class F>
  void write_with(const std::string& name, F f) const {
    std::ostringstream os;
    f(os);
    write(name, os.str());
  }

  void record(Stage s, nlohmann::json meta) const {
    nlohmann::json man;
    if (std::ifstream in(path("manifest.json")); in) {
      try {
        in >> man;
      } catch (...) {
        man = nlohmann::json::object();
      }
    }
    meta["version"] = kVersion;
    man[stage_command(s)] = std::move(meta);
    write("manifest.json", man.dump(2) + "\n");
  }

  const PipelineConfig& cfg() const { return cfg_; }

 private:
  const PipelineConfig& cfg_;
  std::filesystem::path dir_;
};

namespace detail {

inline std::vector<Unit> load_units(const Workspace& ws, bool need_propensity) {
  auto in = ws.open("units.csv", Stage::units);
  auto units = read_units_csv(in);
  if (need_propensity)
    for (const auto& u : units)
      if (std::isnan(u.propensity))
        throw DependencyError("units.csv has no propensity scores; run stage 'fit-propensity' first",
                              "fit-propensity");
  return units;
}

inline Corpus load_corpus(const Workspace& ws) {
  auto pin = ws.open("plays.csv", Stage::ingest);
  auto gin = ws.open("games.csv", Stage::ingest);
  auto plays = read_plays_csv(pin);
  auto games = read_vegas_csv(gin);
  return corpus_from_plays(std::move(plays), std::move(games));
}

struct LoadedCohort {
  std::vector<Unit> units;
  MatchData data;
  MatchedCohort cohort;
};

inline LoadedCohort load_cohort(const Workspace& ws) {
  LoadedCohort l;
  l.units = load_units(ws, true);
  l.data = match_data(l.units);
  auto cin = ws.open("cohort.csv", Stage::match);
  l.cohort.pairs = read_cohort_csv(cin, l.data);
  auto win = ws.open("weights.json", Stage::match);
  nlohmann::json wj;
  win >> wj;
  l.cohort.weights = Eigen::VectorXd::Ones(l.data.X.cols());
  for (std::size_t k = 0; k < l.data.names.size(); ++k)
    if (wj["weights"].contains(l.data.names[k])) l.cohort.weights[k] = wj["weights"][l.data.names[k]].get<double>();
  const auto sc = compute_scaling(l.data.X);
  l.cohort.scaling = sc.S;
  l.cohort.ridged = sc.ridged;
  l.cohort.seed = wj.value("seed", std::uint64_t{0});
  for (const auto& p : l.cohort.pairs) l.cohort.reuse[p.control]++;
  return l;
}

inline void write_funnel_csv(std::ostream& out, const Corpus& c, const UnitBuild& b) {
  csv::Writer w(out);
  w.row({"step", "total", "treated", "control"});
  w.row({"Events", csv::fmt(c.n_events), "", ""});
  w.row({"Plays", csv::fmt(c.n_plays), "", ""});
  w.row({"Plays after cleaning", csv::fmt(c.n_clean_plays), "", ""});
  for (const auto& f : b.funnel)
    w.row({f.step, csv::fmt(f.total), csv::fmt(f.treated), csv::fmt(f.control)});
}

inline std::string funnel_to_string(const Corpus& c, const UnitBuild& b) {
  std::ostringstream os;
  write_funnel_csv(os, c, b);
  return os.str();
}

}  // namespace detail

inline void stage_simulate(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  SimConfig sc = cfg.sim;
  if (sc.seed == SimConfig{}.seed) sc.seed = cfg.stage_seed("simulate");
  const auto sim = simulate_season(sc, cfg.jobs);
  ws.write_with("sim_events.csv", [&](std::ostream& o) { write_events_csv(o, sim.events); });
  ws.write_with("sim_vegas.csv", [&](std::ostream& o) { write_games_csv(o, sim.games); });
  ws.write_with("sim_ledger.csv", [&](std::ostream& o) { write_ledger_csv(o, sim.ledger); });
  ws.record(Stage::simulate, {{"seed", sc.seed},
                              {"n_games", sc.n_games},
                              {"tau", sc.tau},
                              {"oracle_att", oracle_att(sc, sim.ledger)},
                              {"files", {"sim_events.csv", "sim_vegas.csv", "sim_ledger.csv"}}});
}

inline void stage_ingest(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  std::string events = cfg.events_path, vegas = cfg.vegas_path;
  if (events.empty()) {
    events = ws.path("sim_events.csv").string();
    vegas = ws.path("sim_vegas.csv").string();
    if (!std::filesystem::exists(events))
      throw DependencyError("no paths.events configured and no simulated events found; run stage 'simulate' first",
                            "simulate");
  }
  std::ifstream ein(events);
  if (!ein) throw ConfigError("cannot read events file " + events);
  const bool json = events.size() > 5 && events.substr(events.size() - 5) == ".json";
  auto parsed = parse_events(ein, json ? InputFormat::json : InputFormat::csv);
  std::map<std::string, GameInfo> games;
  if (!vegas.empty()) {
    std::ifstream vin(vegas);
    if (!vin) throw ConfigError("cannot read vegas file " + vegas);
    games = read_vegas_csv(vin);
  }
  attach_event_dates(games, parsed.events);
  auto plays = collapse_plays(parsed.events);
  const auto n_plays = plays.size();
  auto cleaned = clean_games(plays);
  ws.write_with("plays.csv", [&](std::ostream& o) { write_plays_csv(o, cleaned.plays); });
  ws.write_with("games.csv", [&](std::ostream& o) { write_games_csv(o, games); });
  ws.write_with("removals.csv", [&](std::ostream& o) { write_removals_csv(o, cleaned.ledger); });
  ws.write_with("ingest_counts.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"step", "total"});
    w.row({"Events", csv::fmt(parsed.events.size())});
    w.row({"Plays", csv::fmt(n_plays)});
    w.row({"Plays after cleaning", csv::fmt(cleaned.plays.size())});
  });
  ws.write_with("row_errors.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"line", "message"});
    for (const auto& e : parsed.errors) w.row({csv::fmt(e.line), e.message});
  });
  ws.record(Stage::ingest, {{"events", parsed.events.size()},
                            {"plays", n_plays},
                            {"clean_plays", cleaned.plays.size()},
                            {"removed_games", cleaned.ledger.size()},
                            {"row_errors", parsed.errors.size()}});
}

inline void stage_runs(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto corpus = detail::load_corpus(ws);
  const auto runs = detect_all_runs(corpus.timelines, cfg.run, cfg.jobs);
  ws.write_with("runs.csv", [&](std::ostream& o) { write_runs_csv(o, runs); });
  ws.record(Stage::runs, {{"rho", cfg.run.rho}, {"window", cfg.run.window}, {"runs", runs.size()}});
}

inline void stage_units(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  auto corpus = detail::load_corpus(ws);
  auto rin = ws.open("runs.csv", Stage::runs);
  const auto runs = read_runs_csv(rin, corpus.timelines);
  const auto ctx = make_covariate_context(corpus.timelines, &corpus.win_prob);
  const auto build = build_units(corpus.timelines, runs, ctx, cfg.moneyline_cutoff);
  ws.write_with("units.csv", [&](std::ostream& o) { write_units_csv(o, build.units); });
  ws.write_with("exclusions.csv", [&](std::ostream& o) { write_exclusions_csv(o, build.exclusions); });
  auto cin = ws.open("ingest_counts.csv", Stage::ingest);
  const auto counts = csv::read_table(cin);
  ws.write_with("funnel.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"step", "total", "treated", "control"});
    for (const auto& r : counts.rows) w.row({r.at(0), r.at(1), "", ""});
    for (const auto& f : build.funnel)
      w.row({f.step, csv::fmt(f.total), csv::fmt(f.treated), csv::fmt(f.control)});
  });
  std::size_t n1 = 0;
  for (const auto& u : build.units) n1 += u.treated;
  ws.record(Stage::units, {{"units", build.units.size()}, {"treated", n1}, {"control", build.units.size() - n1}});
}

inline void stage_propensity(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  auto units = detail::load_units(ws, false);
  const auto opt = cfg.propensity_options();
  bool fallback = false;
  const auto model = fit_propensity_or_fallback(units, opt, fallback);
  attach_propensity(units, model);
  const auto rates = evaluate_cv(units, opt, model.lambda, cfg.cv_splits, cfg.cv_train_fraction, 0.5, cfg.jobs);
  auto j = to_json(model);
  j["fallback_linear"] = fallback;
  ws.write("propensity.json", j.dump(2) + "\n");
  ws.write_with("units.csv", [&](std::ostream& o) { write_units_csv(o, units); });
  ws.write_with("propensity_cv.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"splits", "tnr", "tpr", "npv", "ppv"});
    w.row({csv::fmt(rates.splits), csv::fmt(rates.tnr), csv::fmt(rates.tpr), csv::fmt(rates.npv), csv::fmt(rates.ppv)});
  });
  ws.record(Stage::propensity, {{"seed", opt.seed}, {"lambda", model.lambda}, {"fallback_linear", fallback}});
}

inline BalanceReport balance_of(std::span<const Unit> units, std::span<const Pair> pairs, const PipelineConfig& cfg) {
  BalanceOptions bo;
  bo.bootstrap = cfg.balance_bootstrap;
  bo.q = cfg.fdr_q;
  bo.seed = cfg.stage_seed("balance");
  bo.jobs = cfg.jobs;
  const auto pre = unmatched_groups(units);
  const auto post = matched_groups(units, pairs);
  return group_tests(pre, &post, bo);
}

inline void stage_match(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto units = detail::load_units(ws, true);
  const auto d = match_data(units);
  const auto mcfg = cfg.match_config();
  const auto cohort = genetic_search(d, mcfg);
  ws.write_with("cohort.csv", [&](std::ostream& o) { write_cohort_csv(o, d, cohort); });
  ws.write("weights.json", weights_json(d, cohort, mcfg).dump(2) + "\n");
  const auto rep = balance_of(units, cohort.pairs, cfg);
  ws.write_with("balance.csv", [&](std::ostream& o) { write_balance_csv(o, rep); });
  ws.write("love_plot.svg", love_plot_svg(rep));
  ws.record(Stage::match, {{"seed", mcfg.seed},
                           {"profile", cfg.profile},
                           {"pairs", cohort.pairs.size()},
                           {"unique_controls", cohort.unique_controls()},
                           {"budget_exceeded", cohort.budget_exceeded}});
}

inline void stage_effects(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto l = detail::load_cohort(ws);
  const auto e = estimate_from(l.data, l.cohort, l.units);
  FranchiseOptions fo;
  fo.bootstrap = cfg.effects_bootstrap;
  fo.permutations = cfg.effects_permutations;
  fo.q = cfg.fdr_q;
  fo.seed = cfg.stage_seed("effects");
  fo.jobs = cfg.jobs;
  const auto fx = franchise_effects(l.units, l.cohort.pairs, fo);
  std::size_t n1 = 0;
  for (const auto& u : l.units) n1 += u.treated;
  const auto diffs = pair_differences(l.cohort.pairs, outcomes_of(l.units));
  nlohmann::json j;
  j["att"] = e.att;
  j["se"] = e.se;
  j["p"] = e.p_value;
  j["ci"] = {e.ci_lo, e.ci_hi};
  j["naive"] = naive_diff(l.units);
  j["n_treated"] = n1;
  j["n_control"] = l.units.size() - n1;
  j["n_pairs"] = e.n_pairs;
  j["unique_controls"] = l.cohort.unique_controls();
  j["permutation_p"] = paired_permutation_test(diffs, cfg.effects_permutations, derive_seed(fo.seed, "overall"));
  j["franchise"] = franchise_json(fx);
  j["seed"] = fo.seed;
  j["bootstrap_replicates"] = fo.bootstrap;
  j["permutation_replicates"] = fo.permutations;
  j["variance"] = "Abadie-Imbens, one-to-one matching with replacement";
  ws.write("effects.json", j.dump(2) + "\n");
  ws.write_with("franchise.csv", [&](std::ostream& o) { write_franchise_csv(o, fx); });
  std::vector<svg::Interval> rows;
  for (const auto& f : fx) rows.push_back({f.franchise, f.att, f.ci_lo, f.ci_hi, f.rejected});
  ws.write("franchise.svg", svg::forest_plot("Per-franchise timeout effect", "ATT (point-minutes)", rows));
  ws.record(Stage::effects, {{"seed", fo.seed}, {"att", e.att}, {"se", e.se}});
}

inline void stage_sensitivity(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto l = detail::load_cohort(ws);
  const auto diffs = pair_differences(l.cohort.pairs, outcomes_of(l.units));
  const auto grid = cfg.gammas();
  const auto curve = sensitivity_curve(diffs, grid);
  const auto gs = gamma_star(diffs, cfg.gamma_step, cfg.gamma_cap);
  ws.write_with("sensitivity.csv", [&](std::ostream& o) { write_sensitivity_csv(o, curve); });
  std::vector<svg::BandPoint> pts;
  for (const auto& p : curve) pts.push_back({p.gamma, p.pe_lo, p.pe_hi, p.ci_lo, p.ci_hi});
  ws.write("sensitivity.svg", svg::band_plot(pts, gs.gamma));
  nlohmann::json j;
  j["gamma_star"] = gs.gamma;
  j["already_contains_zero"] = gs.already_contains_zero;
  j["hit_cap"] = gs.hit_cap;
  j["statistic"] = "Wilcoxon signed rank";
  j["caveat"] = "Bounds invert two one-sided tests at alpha/2 each; the resulting interval is conservative.";
  ws.write("sensitivity.json", j.dump(2) + "\n");
  ws.record(Stage::sensitivity, {{"gamma_star", gs.gamma}});
}

inline void stage_sweep(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto corpus = detail::load_corpus(ws);
  const auto cells = run_definition_sweep(corpus, cfg);
  ws.write_with("sweep.csv", [&](std::ostream& o) { write_sweep_csv(o, cells); });
  ws.record(Stage::sweep, {{"cells", cells.size()}, {"profile", cfg.profile}});
}

inline void stage_report(const Workspace& ws) {
  const auto& cfg = ws.cfg();
  const auto l = detail::load_cohort(ws);
  auto copy = [&](const std::string& from, Stage producer, const std::string& to) {
    auto in = ws.open(from, producer);
    std::ostringstream os;
    os << in.rdbuf();
    ws.write("report/" + to, os.str());
  };
  copy("funnel.csv", Stage::units, "table_s1_funnel.csv");
  copy("balance.csv", Stage::match, "table_s3_balance.csv");
  copy("love_plot.svg", Stage::match, "fig3_love_plot.svg");
  copy("franchise.svg", Stage::effects, "fig8_franchise.svg");
  copy("franchise.csv", Stage::effects, "fig8_franchise.csv");
  copy("sensitivity.svg", Stage::sensitivity, "fig9_sensitivity.svg");
  copy("sensitivity.csv", Stage::sensitivity, "fig9_sensitivity.csv");
  copy("propensity_cv.csv", Stage::propensity, "table_s2_propensity_cv.csv");
  const bool have_sweep = std::filesystem::exists(ws.path("sweep.csv"));
  if (have_sweep) copy("sweep.csv", Stage::sweep, "table_b1_sweep.csv");

  // Table 2: units per period.
  const auto pc = period_counts(l.units);
  ws.write_with("report/table2_periods.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"period", "treated", "control", "total"});
    std::size_t a = 0, b = 0;
    for (int p = 0; p < 4; ++p) {
      w.row({csv::fmt(p + 1), csv::fmt(pc[p][0]), csv::fmt(pc[p][1]), csv::fmt(pc[p][0] + pc[p][1])});
      a += pc[p][0];
      b += pc[p][1];
    }
    w.row({"total", csv::fmt(a), csv::fmt(b), csv::fmt(a + b)});
  });

  // Fig. 6: outcome distributions, matched treated vs matched controls.
  std::vector<double> yt, yc, pt, pcn;
  for (const auto& p : l.cohort.pairs) {
    yt.push_back(l.units[p.treated].outcome);
    yc.push_back(l.units[p.control].outcome);
  }
  for (const auto& u : l.units) (u.treated ? pt : pcn).push_back(u.propensity);
  ws.write("report/fig6_outcomes.svg",
           svg::histogram("Outcome after the run", "y (point-minutes)",
                          {{"timeout", yt, "#c0392b"}, {"no timeout (matched)", yc, "#2471a3"}}, 30, true));
  ws.write("report/fig7_propensity.svg",
           svg::histogram("Propensity score", "estimated P(timeout)",
                          {{"timeout", pt, "#c0392b"}, {"no timeout", pcn, "#2471a3"}}, 30, false));

  // Supplementary: matching variability over seeds.
  const auto rows = matching_variability(l.data, l.units, cfg.match_config(), cfg.variability_seeds);
  std::vector<double> atts;
  for (const auto& r : rows) atts.push_back(r.att);
  const double mean = mean_of(atts);
  const double sd = atts.size() > 1 ? std::sqrt(variance_of(atts)) : 0.0;
  const auto e = estimate_from(l.data, l.cohort, l.units);
  ws.write_with("report/table_s2_seed_variability.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"seed", "att", "se"});
    for (const auto& r : rows) w.row({std::to_string(r.seed), csv::fmt(r.att), csv::fmt(r.se)});
  });
  std::vector<svg::Interval> iv;
  for (std::size_t k = 0; k < rows.size(); ++k)
    iv.push_back({"seed " + std::to_string(k + 1), rows[k].att, rows[k].att - 2 * rows[k].se,
                  rows[k].att + 2 * rows[k].se, std::abs(rows[k].att - mean) > 2 * e.se});
  ws.write("report/fig_s2_seed_variability.svg", svg::forest_plot("ATT across matching seeds", "ATT", iv));

  // Appendix A audit.
  const auto audit = overlap_audit(l.units, l.cohort.pairs);
  ws.write_with("report/audit.csv", [&](std::ostream& o) {
    csv::Writer w(o);
    w.row({"matched_pairs", "unique_controls", "disjoint_window_controls"});
    w.row({csv::fmt(l.cohort.pairs.size()), csv::fmt(audit.unique_controls), csv::fmt(audit.disjoint_controls)});
  });

  nlohmann::json eff;
  if (std::ifstream in(ws.path("effects.json")); in) in >> eff;
  nlohmann::json sens;
  if (std::ifstream in(ws.path("sensitivity.json")); in) in >> sens;
  std::ostringstream md;
  md << "# Timeout effect report\n\n";
  md << "| quantity | value |\n|---|---|\n";
  md << "| treated units | " << pc[0][0] + pc[1][0] + pc[2][0] + pc[3][0] << " |\n";
  md << "| control units | " << pc[0][1] + pc[1][1] + pc[2][1] + pc[3][1] << " |\n";
  md << "| ATT | " << csv::fmt(e.att) << " |\n";
  md << "| Abadie-Imbens SE | " << csv::fmt(e.se) << " |\n";
  if (eff.contains("naive")) md << "| naive difference | " << csv::fmt(eff["naive"].get<double>()) << " |\n";
  if (sens.contains("gamma_star")) md << "| gamma star | " << csv::fmt(sens["gamma_star"].get<double>()) << " |\n";
  md << "| seed SD of ATT (" << rows.size() << " seeds) | " << csv::fmt(sd) << " |\n";
  md << "| unique matched controls | " << audit.unique_controls << " |\n";
  md << "| disjoint-window controls | " << audit.disjoint_controls << " |\n\n";
  md << "Tables: table_s1_funnel.csv, table2_periods.csv, table_s2_propensity_cv.csv, "
        "table_s2_seed_variability.csv, table_s3_balance.csv"
     << (have_sweep ? ", table_b1_sweep.csv" : "") << ", audit.csv.\n\n";
  md << "Figures: fig3_love_plot.svg, fig6_outcomes.svg, fig7_propensity.svg, fig8_franchise.svg, "
        "fig9_sensitivity.svg, fig_s2_seed_variability.svg.\n";
  ws.write("report/report.md", md.str());
  ws.record(Stage::report, {{"variability_seeds", rows.size()}, {"seed_sd", sd}, {"se", e.se}});
}

inline void run_stage(Stage s, const PipelineConfig& cfg) {
  cfg.validate();
  Workspace ws(cfg);
  switch (s) {
    case Stage::simulate: return stage_simulate(ws);
    case Stage::ingest: return stage_ingest(ws);
    case Stage::runs: return stage_runs(ws);
    case Stage::units: return stage_units(ws);
    case Stage::propensity: return stage_propensity(ws);
    case Stage::match: return stage_match(ws);
    case Stage::effects: return stage_effects(ws);
    case Stage::sensitivity: return stage_sensitivity(ws);
    case Stage::sweep: return stage_sweep(ws);
    case Stage::report: return stage_report(ws);
  }
}

// Every stage in order; simulates a season first when no events are configured.
inline void run_all(const PipelineConfig& cfg) {
  if (cfg.events_path.empty()) run_stage(Stage::simulate, cfg);
  for (Stage s : {Stage::ingest, Stage::runs, Stage::units, Stage::propensity, Stage::match, Stage::effects,
                  Stage::sensitivity})
    run_stage(s, cfg);
  if (cfg.sweep) run_stage(Stage::sweep, cfg);
  run_stage(Stage::report, cfg);
}

}  // namespace runstop
