#pragma once

#include <cstdint>
#include <optional>
#include <random>

#include "hiap/tensor.hpp"

namespace hiap {

/// Seeded random source. A default-constructed Rng is unseeded and refuses to
/// produce numbers, so every stochastic path is reproducible by construction.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t seed) : engine_(std::in_place, seed) {}

  bool seeded() const { return engine_.has_value(); }

  std::mt19937_64& engine() {
    if (!engine_) throw Error("random generator used without a seed");
    return *engine_;
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine()); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine());
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine()); }
  bool coin(double p = 0.5) { return uniform() < p; }

  /// Independent child stream derived from this one.
  Rng split() { return Rng(engine()()); }

 private:
  std::optional<std::mt19937_64> engine_;
};

}  // namespace hiap
