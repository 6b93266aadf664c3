#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "flareon/error.hpp"

namespace flareon {

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

/// Counter-based random stream: draw k is a pure function of
/// (seed, stream id, k), so results never depend on call interleaving
/// across streams or on the platform.
///
/// Streams are cheap values. Derive independent sub-streams with fork()
/// (per sample, per step, per target) instead of sharing one sequence.
class RngStream {
 public:
  constexpr explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream), key_(derive_key(seed, stream)) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t stream() const noexcept { return stream_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

  /// Value at an absolute draw index; does not advance the stream.
  constexpr std::uint64_t at(std::uint64_t index) const noexcept {
    return detail::mix64(key_ + (index + 1) * detail::kGolden);
  }

  constexpr std::uint64_t next_u64() noexcept { return at(counter_++); }

  /// Child stream whose id is a hash of this stream's id and `child`.
  constexpr RngStream fork(std::uint64_t child) const noexcept {
    return RngStream(seed_, detail::mix64(stream_ * detail::kGolden ^ detail::mix64(child + 0x632be59bd9b4e019ULL)));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1).
  double uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection, so every value is exactly equally likely.
  std::uint64_t below(std::uint64_t n) {
    expect(n > 0, "RngStream::below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t v = next_u64();
      if (v < limit) return v % n;
    }
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() noexcept {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gamma(shape, 1) by Marsaglia-Tsang. Shapes below one use the
  /// Gamma(shape + 1) * U^(1/shape) boost.
  double gamma(double shape) {
    expect(shape > 0.0 && std::isfinite(shape), "RngStream::gamma: shape must be positive, got ", shape);
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform_open(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = 0.0;
      double v = 0.0;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      const double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Beta(a, b) as G1 / (G1 + G2) with independent gamma draws.
  double beta(double a, double b) {
    const double g1 = gamma(a);
    const double g2 = gamma(b);
    return g1 / (g1 + g2);
  }

 private:
  static constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) noexcept {
    return detail::mix64(seed ^ detail::mix64(stream + detail::kGolden));
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace flareon
