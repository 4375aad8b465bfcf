#pragma once

#include <algorithm>

#include "runstop/common.hpp"
#include "runstop/timeline.hpp"

namespace runstop {

inline constexpr Ticks kPostWindow = kTicksPerMinute;

// Integrated centred score difference over (t, t + 1], signed so that
// positive values favour the team that was being run on:
//   y = -sgn(s) * ∫_t^{t+1} [Δ(x) - Δ(t)] dx
// Exact: each jump J at b in (t, t+1] contributes J * (t + 1 - b).
inline double outcome_ticks(const GameTimeline& tl, Ticks t, int s) {
  if (s == 0) throw DomainError("outcome needs a non-zero signed run total");
  const Ticks end = t + kPostWindow;
  if (end > period_end(period_of(t)))
    throw DomainError("post-treatment window crosses a period boundary");
  const auto& bps = tl.breakpoints;
  auto it = std::upper_bound(bps.begin(), bps.end(), t,
                             [](Ticks v, const Breakpoint& b) { return v < b.t; });
  int prev = tl.delta_at(t);
  long long area = 0;  // point-ticks
  for (; it != bps.end() && it->t <= end; ++it) {
    area += static_cast<long long>(it->delta - prev) * (end - it->t);
    prev = it->delta;
  }
  return -sgn(s) * static_cast<double>(area) / kTicksPerMinute;
}

inline double outcome(const GameTimeline& tl, double t, int s) {
  check_time(t);
  return outcome_ticks(tl, to_ticks(t), s);
}

}  // namespace runstop
