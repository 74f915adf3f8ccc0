// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace deki {

/// Purpose tags keying independent random streams within one experiment.
/// A stream is identified by (seed, purpose, step); draws inside a stream
/// are counter-based, so results do not depend on evaluation order across
/// streams or on threading.
enum class Purpose : std::uint32_t {
  kInitEnsemble = 1,
  kDropoutMask = 2,
  kDataNoise = 3,
  kTruth = 4,
  kProblemSetup = 5,   // randomized transport speed, random linear maps
  kLekiNoise = 6,
  kGeneric = 7,
};

namespace detail {

// SplitMix64 output function; a keyed counter pushed through this mixer
// gives a statistically solid stateless generator.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_key(std::uint64_t seed, std::uint32_t purpose,
                                std::uint64_t step) {
  std::uint64_t k = mix64(seed ^ 0x8000000000000000ULL);
  k = mix64(k ^ (static_cast<std::uint64_t>(purpose) << 32));
  k = mix64(k ^ step);
  return k;
}

}  // namespace detail

/// Counter-based random stream. Bit-reproducible for a given
/// (seed, purpose, step) key on any platform; cheap to construct, so
/// callers make one per (step, purpose) rather than threading state around.
class RngStream {
 public:
  RngStream(std::uint64_t seed, Purpose purpose, std::uint64_t step = 0)
      : key_(detail::stream_key(seed, static_cast<std::uint32_t>(purpose), step)) {}

  std::uint64_t next_u64() { return detail::mix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

  /// Uniform on (0,1]; never returns 0, so log() is safe.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() <= p; }

  /// Standard normal via Box-Muller; pairs are cached.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace deki
