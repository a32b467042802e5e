#pragma once

#include <array>
#include <cstdint>

namespace muonseg {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// A generator is identified by a 64-bit key and a 64-bit stream id; the
// remaining 64 bits of the 128-bit counter enumerate blocks within the
// stream. Two generators with the same (key, stream) produce identical
// sequences, and distinct streams never overlap, so work can be split across
// threads without changing any drawn value.
//
// All distributions are implemented here rather than through <random> so the
// drawn values do not depend on the standard library vendor.
class Philox {
 public:
  Philox(std::uint64_t key, std::uint64_t stream);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on (0, 1).
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }
  double exponential(double mean);
  std::int64_t poisson(double lambda);

 private:
  void refill();

  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 4> counter_;
  std::array<std::uint32_t, 4> block_{};
  int cursor_ = 4;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

// Stateless 64-bit mixer used to derive keys from strings and seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_string(const char* s);

}  // namespace muonseg
