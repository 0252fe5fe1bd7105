#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace reconfair {

/// Stable 64-bit hash (FNV-1a followed by a splitmix finalizer).
std::uint64_t stable_hash(std::string_view text) noexcept;

/// Derives an independent seed for a named sub-task from a master seed.
/// The result depends only on its arguments, never on call order.
std::uint64_t derive_seed(std::uint64_t master, std::string_view key) noexcept;
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t counter) noexcept;

/// Seeded generator with platform-independent draws. Only the raw
/// mt19937_64 stream is used; every distribution is implemented here so
/// results do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0,1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();
  /// Poisson draw: inversion for lambda < 30, otherwise a normal
  /// approximation with continuity correction.
  std::uint64_t poisson(double lambda);

 private:
  std::mt19937_64 engine_;
};

}  // namespace reconfair
