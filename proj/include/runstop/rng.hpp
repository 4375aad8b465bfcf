#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <thread>
#include <vector>

namespace runstop {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named substream derivation: every stochastic consumer gets its own seed
// from (master, name, index) so results do not depend on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(master ^ h) + index);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::string_view name,
                    std::uint64_t index = 0) {
  return Rng(derive_seed(master, name, index));
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index must be
// independent; results are written by index so output is thread-count free.
template <class Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (unsigned w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace runstop
