#pragma once

#include <cmath>
#include <cstdint>

namespace lynx {

// Counter-style splittable generator built on the splitmix64 mixer.
// Streams are fully determined by the 64-bit seed, so every sampled
// tensor in the repo is reproducible from (seed, spec) alone. Reports
// identify the algorithm as "splitmix64-boxmuller".
inline constexpr const char* kRngAlgorithm = "splitmix64-boxmuller";

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the paired variate is cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent stream for (seed, salt), used to give every
// layer / case / batch its own deterministic substream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  SplitMix64 mix(seed ^ (salt * 0xD6E8FEB86659FD93ULL + 0x632BE59BD9B4E019ULL));
  return mix.next_u64();
}

}  // namespace lynx
