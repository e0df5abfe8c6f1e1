#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "svt/rng.hpp"

using svt::Rng;

TEST_CASE("identical seed and call sequence gives identical draws") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(42), d(43);
  int differ = 0;
  for (int i = 0; i < 64; ++i) differ += c.next_u64() != d.next_u64();
  CHECK(differ == 64);
}

TEST_CASE("skip is equivalent to discarding draws") {
  Rng a(7), b(7);
  for (int i = 0; i < 5; ++i) (void)a.next_u64();
  b.skip(5);
  for (int i = 0; i < 16; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("derived streams are stable and independent of parent state") {
  Rng parent(99);
  const Rng d1 = parent.derive(3);
  (void)parent.next_u64();
  const Rng d2 = parent.derive(3);  // same id after parent advanced
  Rng x = d1, y = d2;
  for (int i = 0; i < 32; ++i) REQUIRE(x.next_u64() == y.next_u64());
  // different ids disagree
  Rng u = parent.derive(4), v = parent.derive(5);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += u.next_u64() == v.next_u64();
  CHECK(same == 0);
}

TEST_CASE("uniform lies in [0,1) with the right first moments") {
  Rng r(2024);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    s += u;
    s2 += u * u;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("normal has unit moments and a fixed two-draw footprint") {
  Rng r(5);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(s / n == doctest::Approx(0.0).epsilon(0.01));
  CHECK(std::sqrt(s2 / n) == doctest::Approx(1.0).epsilon(0.01));
  // no cached second value: each call consumes exactly two counter steps
  Rng a(11);
  (void)a.normal();
  CHECK(a.counter == 2);
  (void)a.normal();
  CHECK(a.counter == 4);
}

TEST_CASE("trunc_normal respects the clip and truncated spread") {
  Rng r(6);
  const double sigma = 0.02;
  double s2 = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double z = r.trunc_normal(sigma, 2.0);
    REQUIRE(std::abs(z) <= 2.0 * sigma);
    s2 += z * z;
  }
  // sd of N(0,1) truncated at +/-2 is sqrt(1 - 4 phi(2)/(2 Phi(2) - 1))
  const double want = 0.87962566103423978;
  CHECK(std::sqrt(s2 / n) / sigma == doctest::Approx(want).epsilon(0.01));
}

TEST_CASE("bernoulli and randint hit their ranges and rates") {
  Rng r(8);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += r.bernoulli(0.3);
  CHECK(hits / double(n) == doctest::Approx(0.3).epsilon(0.02));
  std::vector<int> counts(10, 0);
  for (int i = 0; i < n; ++i) {
    const auto k = r.randint(10);
    REQUIRE(k < 10);
    ++counts[k];
  }
  for (int c : counts) CHECK(c == doctest::Approx(n / 10.0).epsilon(0.05));
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng r1(31), r2(31);
  svt::shuffle(v, r1);
  svt::shuffle(w, r2);
  CHECK(v == w);
  CHECK(v != std::vector<int>(v.size(), 0));
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) REQUIRE(sorted[i] == i);
  // moved at least most elements
  int moved = 0;
  for (int i = 0; i < 100; ++i) moved += v[i] != i;
  CHECK(moved > 80);
}

TEST_CASE("draws are pinned across platforms") {
  // golden values for the splitmix64 mixing chain; a change here breaks
  // every stored experiment seed
  Rng r(123);
  const std::uint64_t g0 = r.next_u64();
  const std::uint64_t g1 = r.next_u64();
  Rng d = r.derive(7);
  const std::uint64_t g2 = d.next_u64();
  CHECK(g0 == 13032462758197477675ull);
  CHECK(g1 == 18015028434894305148ull);
  CHECK(g2 == 13199905918858520105ull);
}
