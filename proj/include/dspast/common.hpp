#pragma once

// Shared error types, deterministic RNG and small utilities used by every
// module. Nothing in here depends on the rest of the library.

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dspast {

inline constexpr const char* kToolVersion = "0.1.0";

// Error taxonomy. CLI maps these to exit codes (config -> 1, data -> 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InvalidInput : std::runtime_error {
  explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64; also used as the mixing function for derived seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d49b9b97f4a7c1ULL;
  return z ^ (z >> 31);
}

// Mixes a tag (string or integer) into a seed. Used to derive independent
// deterministic streams, e.g. per clip, per epoch, per parameter name.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + (tag << 1));
  return splitmix64(s);
}

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag) {
  // FNV-1a over the tag, then splitmix.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

// Counter-based PRNG built on splitmix64. Unlike std::mt19937 the state is
// two words, serialization is trivial and the stream is identical on every
// platform, which the strict-determinism contracts rely on.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0) : state_(seed) {
    // Warm up so that small seeds do not produce correlated first draws.
    splitmix64(state_);
  }

  std::uint64_t u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free modulo is fine here; n is always tiny vs 2^64.
    return u64() % n;
  }

  // Box-Muller; uses exactly two uniforms per pair of draws.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated to +-2 sigma, the usual transformer init.
  double trunc_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// Wraps an azimuth in degrees into [-180, 180).
inline double wrap_azimuth_deg(double az) {
  double a = std::fmod(az + 180.0, 360.0);
  if (a < 0) a += 360.0;
  return a - 180.0;
}

}  // namespace dspast
