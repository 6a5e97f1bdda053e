#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace lottalora {

/// Tag written into every artifact header. Bump the suffix whenever the draw
/// order or any transform below changes.
inline constexpr std::string_view kPrngAlgorithmId = "splitmix64-boxmuller-v1";

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// splitmix64 output finalizer (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Independent purposes a run draws randomness for. Each maps to its own
/// derived stream so that, e.g., dropout can never shift backbone bytes.
enum class DrawKind : std::uint8_t {
  BackboneWeight = 1,
  AdapterAInit = 2,
  DropoutMask = 3,
  DataShuffle = 4,
  HeadInit = 5,
};

/*
 * Deterministic random stream: splitmix64 over a 64-bit counter state.
 *
 * Draw order (the reproducibility contract):
 *   next_u64      state += golden gamma; return mix64(state)
 *   next_unit     (next_u64 >> 11) * 2^-53, in [0, 1)
 *   next_gaussian Box-Muller on u1 = next_unit, u2 = next_unit:
 *                 r = sqrt(-2 ln(1 - u1)), t = 2 pi u2; returns r cos t and
 *                 caches r sin t, which the following call returns without
 *                 consuming the state.
 */
class Stream {
 public:
  constexpr Stream() = default;
  constexpr explicit Stream(std::uint64_t state) : state_(state) {}

  constexpr std::uint64_t state() const noexcept { return state_; }
  static constexpr std::string_view algorithm_id() noexcept { return kPrngAlgorithmId; }

  constexpr std::uint64_t next_u64() noexcept {
    state_ += kGoldenGamma;
    return mix64(state_);
  }

  constexpr double next_unit() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Uniform integer in [0, n) by Lemire's multiply-shift with rejection.
  std::uint64_t next_below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
      if (static_cast<std::uint64_t>(m) >= threshold) {
        return static_cast<std::uint64_t>(m >> 64);
      }
    }
  }

  friend constexpr bool operator==(const Stream& a, const Stream& b) noexcept {
    return a.state_ == b.state_ && a.has_spare_ == b.has_spare_ &&
           (!a.has_spare_ || a.spare_ == b.spare_);
  }

 private:
  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stream for (seed, layer, purpose). Each mixing round is a bijection, so
/// streams for different kinds or layers under one seed never coincide.
constexpr Stream derive_stream(std::uint64_t global_seed, std::uint64_t layer_index,
                               DrawKind kind) noexcept {
  std::uint64_t z = mix64(global_seed);
  z = mix64(z ^ static_cast<std::uint64_t>(kind));
  z = mix64(z + (layer_index + 1) * kGoldenGamma);
  return Stream(z);
}

/// Seed for the n-th scaffold redraw of a resampling schedule. Event 0 is the
/// original backbone seed.
constexpr std::uint64_t resample_seed(std::uint64_t global_seed, std::uint64_t event) noexcept {
  if (event == 0) return global_seed;
  return mix64(global_seed ^ mix64(event * kGoldenGamma + 0x5EEDULL));
}

}  // namespace lottalora
