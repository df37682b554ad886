#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

#include "blocr/common.hpp"

namespace blocr {

// Substream tags. Every random draw site keys its own engine off
// (root seed, tag, counters...), so results do not depend on the order in
// which sites execute or on the number of worker threads.
enum class StreamKind : std::uint64_t {
  eta = 1,
  lambda = 2,
  beta = 3,
  pi = 4,
  sim_partition = 16,
  sim_eta = 17,
  sim_lambda = 18,
  sim_beta = 19,
  sim_pi = 20,
  sim_covariates = 21,
  sim_observations = 22,
  sim_replicate = 23,
  test = 99,
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Mixes the root seed with an arbitrary key path into one 64-bit stream seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> words) {
  std::uint64_t state = root ^ 0xD1B54A32D192ED03ULL;
  std::uint64_t out = detail::splitmix64(state);
  for (std::uint64_t w : words) {
    state ^= w + 0x9E3779B97F4A7C15ULL + (out << 6) + (out >> 2);
    out = detail::splitmix64(state);
  }
  return out;
}

// Deterministic draw stream. mt19937_64 is fully specified by the standard;
// all distributions below are implemented here so draws are pinned by this
// code and not by the C++ library's implementation-defined algorithms.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng substream(std::uint64_t root, StreamKind kind,
                       std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    return Rng(derive_seed(root, {static_cast<std::uint64_t>(kind), a, b, c}));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on (0, 1): 53-bit mantissa, zero excluded so logs are safe.
  double uniform() {
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection from the top keeps the distribution exact.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  bool bernoulli(double prob) { return uniform() < prob; }

  // Box-Muller, no cached spare: one value per two uniforms.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  void fill_normal(std::span<double> out) {
    std::size_t i = 0;
    for (; i + 1 < out.size(); i += 2) {
      const double u1 = uniform();
      const double u2 = uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      out[i] = r * std::cos(2.0 * M_PI * u2);
      out[i + 1] = r * std::sin(2.0 * M_PI * u2);
    }
    if (i < out.size()) out[i] = normal();
  }

  // Marsaglia-Tsang; shape > 0, unit scale.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw numeric_error("gamma draw requires shape > 0");
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      const double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Inverse-Gamma(shape, rate): density ~ x^{-(shape+1)} exp(-rate / x).
  double inv_gamma(double shape, double rate) {
    if (!(rate > 0.0)) throw numeric_error("inv_gamma draw requires rate > 0");
    return rate / gamma(shape);
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace blocr
