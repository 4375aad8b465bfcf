#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace runstop {

// Game time is kept on an integer grid of tenths of a second so that window
// boundaries, the 5 s lattice and breakpoints compare exactly.
using Ticks = std::int32_t;

inline constexpr Ticks kTicksPerSecond = 10;
inline constexpr Ticks kTicksPerMinute = 600;
inline constexpr Ticks kPeriodTicks = 12 * kTicksPerMinute;
inline constexpr Ticks kRegulationTicks = 4 * kPeriodTicks;

inline Ticks to_ticks(double minutes) {
  return static_cast<Ticks>(std::llround(minutes * kTicksPerMinute));
}

inline constexpr double to_minutes(Ticks t) {
  return static_cast<double>(t) / kTicksPerMinute;
}

// Period p covers ((p-1)*12, p*12]; t = 0 belongs to period 1.
inline int period_of(Ticks t) {
  if (t <= kPeriodTicks) return 1;
  return static_cast<int>((t - 1) / kPeriodTicks) + 1;
}

inline Ticks period_start(int period) { return (period - 1) * kPeriodTicks; }
inline Ticks period_end(int period) { return period * kPeriodTicks; }

enum class Side { none, home, away };

inline Side other(Side s) {
  switch (s) {
    case Side::home: return Side::away;
    case Side::away: return Side::home;
    default: return Side::none;
  }
}

inline std::string_view to_string(Side s) {
  switch (s) {
    case Side::home: return "home";
    case Side::away: return "away";
    default: return "none";
  }
}

inline int sgn(double x) { return (x > 0) - (x < 0); }

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A stage was asked to run before the artifacts it reads exist.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& what, std::string missing_stage)
      : Error(what), stage(std::move(missing_stage)) {}
  std::string stage;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> deviance_trace)
      : Error(what), trace(std::move(deviance_trace)) {}
  std::vector<double> trace;
};

}  // namespace runstop
