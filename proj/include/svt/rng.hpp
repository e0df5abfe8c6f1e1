#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace svt {

// Counter-based generator: draw i is a pure function of (seed, i), so streams
// can be skipped in O(1) and split per sample without sharing state between
// loader workers. Same seed + call sequence -> same draws on any platform.
struct Rng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  Rng() = default;
  explicit Rng(std::uint64_t s) : seed(s) {}

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t next_u64() {
    ++counter;
    return mix(seed + counter * 0x9E3779B97F4A7C15ull);
  }

  // Independent stream keyed by id; does not advance this generator.
  Rng derive(std::uint64_t stream_id) const {
    return Rng(mix(seed ^ mix(stream_id + 0x9E3779B97F4A7C15ull)));
  }

  void skip(std::uint64_t n) { counter += n; }

  // UniformRandomBitGenerator interface (do not feed to std::shuffle if the
  // result must be reproducible across standard libraries; use svt::shuffle).
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~0ull; }
  result_type operator()() { return next_u64(); }

  // [0, 1), 53 mantissa bits
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  float uniform_f(float lo, float hi) {
    return static_cast<float>(uniform(lo, hi));
  }

  // Box-Muller, cosine branch only: exactly two draws per call, no cached
  // second value, so the counter advance per call is fixed.
  double normal() {
    const double u1 =
        static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // N(0, sigma^2) rejected outside +/- clip*sigma
  double trunc_normal(double sigma, double clip = 2.0) {
    double z = normal();
    while (std::abs(z) > clip) z = normal();
    return z * sigma;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // [0, n); Lemire multiply-shift (deterministic, bias < n / 2^64)
  std::uint64_t randint(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }
};

// Fisher-Yates with svt::Rng draws; reproducible everywhere, unlike
// std::shuffle whose draw pattern is implementation-defined.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.randint(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace svt
