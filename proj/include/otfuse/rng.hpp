#pragma once

#include <cstdint>

#include "otfuse/tensor.hpp"

namespace otfuse {

// Counter-based generator: draw k of a stream seeded with s is
// splitmix64_mix(s + (k + 1) * 0x9E3779B97F4A7C15). Normals use the
// Box-Muller transform on pairs of draws, both outputs consumed in order.
// The stream is fully specified by these two formulas, so it is identical
// across compilers and platforms.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  // Uniform in (0, 1], safe for log().
  double uniform_open();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Independent child stream; does not advance this generator.
  Rng fork(std::uint64_t stream) const;

private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

Tensor rand_normal(Rng &rng, const Shape &shape);
// Normal(0, std) resampled until within two standard deviations.
Tensor rand_trunc_normal(Rng &rng, const Shape &shape, float std);

template <typename Vec> void shuffle(Rng &rng, Vec &v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

} // namespace otfuse
