#pragma once

#include <cstdint>

namespace blopt {

// Counter-based generator: every draw is a pure function of (seed, stream,
// counter), so instances can be split freely and replay is exact.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal (Box-Muller)
  std::int64_t uniform_int(std::int64_t n);  // [0, n)

  // Independent generator for a named substream.
  CounterRng split(std::uint64_t stream) const { return CounterRng(key_, stream); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace blopt
