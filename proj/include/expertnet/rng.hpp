#pragma once

#include <cstdint>
#include <random>

namespace expertnet {

// Deterministic random source. The raw stream is mt19937_64, whose output
// sequence is fixed by the C++ standard; the real-valued draws are derived
// here rather than through <random> distributions, which are
// implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace expertnet
