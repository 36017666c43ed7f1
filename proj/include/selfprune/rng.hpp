#pragma once
// Seeded generator whose position is checkpointable as (seed, draw count).
// Every stochastic decision in the search flows through one of these so a
// resumed run replays the exact draw sequence.

#include <cmath>
#include <cstdint>
#include <random>

namespace selfprune {

class CountingRng {
 public:
  explicit CountingRng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  static CountingRng restore(std::uint64_t seed, std::uint64_t draws) {
    CountingRng r(seed);
    r.eng_.discard(draws);
    r.draws_ = draws;
    return r;
  }

  std::uint64_t next_u64() {
    ++draws_;
    return eng_();
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // N(0, sigma^2) via Box-Muller; always consumes exactly two draws.
  double normal(double sigma) {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    return sigma * std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // [0, n)
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t draws_ = 0;
  std::mt19937_64 eng_;
};

}  // namespace selfprune
