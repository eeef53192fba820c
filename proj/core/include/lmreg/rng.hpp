// rng.hpp - platform-stable seeded random number generation.
//
// The standard library engines are portable but its distributions are not, so draws are
// produced here from xoshiro256** with explicitly specified transforms. Identical seeds give
// identical sequences on every platform and compiler.

#pragma once

#include <array>
#include <cstdint>

namespace lmreg {

class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed);
    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);
    // Standard normal via Box-Muller; the second variate is cached.
    double normal();

    // Deterministically derived independent stream (e.g. one per training step).
    SeededRng fork(std::uint64_t stream);

  private:
    std::uint64_t seed_ = 0;
    std::array<std::uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace lmreg
