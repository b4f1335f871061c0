#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "afvla/core.hpp"

#include <cmath>
#include <set>
#include <vector>

using namespace afvla;

TEST_CASE("fnv1a matches the reference vectors and chains") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a("ab") == fnv1a("b", fnv1a("a")));
  CHECK(fnv1a("backbone.block0.attn.wq") != fnv1a("backbone.block0.attn.wk"));
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng s1 = Rng::stream(7, "alpha");
  Rng s2 = Rng::stream(7, "beta");
  Rng s3 = Rng::stream(8, "alpha");
  std::set<std::uint64_t> first = {s1.next_u64(), s2.next_u64(), s3.next_u64()};
  CHECK(first.size() == 3);

  Rng s1again = Rng::stream(7, "alpha");
  s1again.next_u64();
  Rng s1c = Rng::stream(7, "alpha");
  CHECK(s1c.next_u64() == Rng::stream(7, "alpha").next_u64());
}

TEST_CASE("uniform draws live in their interval") {
  Rng r(3);
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform(-2.0, 5.0);
    CHECK(u >= -2.0);
    CHECK(u < 5.0);
  }
  for (int i = 0; i < 1000; ++i) CHECK(r.uniform_index(7) < 7);
}

TEST_CASE("normal draws have roughly standard moments") {
  Rng r(11);
  const int n = 40000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    sum += x;
    sq += x * x;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("fill_normal consumes draws in row-major order") {
  Rng a(99), b(99);
  Matd m(2, 3);
  a.fill_normal(m, 0.5);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 3; ++j) CHECK(m(i, j) == doctest::Approx(0.5 * b.normal()));
}

TEST_CASE("sinusoidal code is fixed and position-dependent") {
  double at00[8], at00b[8], mid[8];
  sinusoidal_code8(0.0, 0.0, at00);
  sinusoidal_code8(0.0, 0.0, at00b);
  const double expect[8] = {0, 1, 0, 1, 0, 1, 0, 1};
  for (int i = 0; i < 8; ++i) {
    CHECK(at00[i] == doctest::Approx(expect[i]));
    CHECK(at00[i] == at00b[i]);
  }
  sinusoidal_code8(0.25, 0.5, mid);
  CHECK(mid[0] == doctest::Approx(1.0));          // sin(pi/2)
  CHECK(mid[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(mid[2] == doctest::Approx(0.0).epsilon(1e-12));  // sin(pi)
  CHECK(mid[3] == doctest::Approx(-1.0));         // cos(pi)
  CHECK(mid[4] == doctest::Approx(0.0).epsilon(1e-12));  // f=2: sin(pi)
  CHECK(mid[5] == doctest::Approx(-1.0));         // f=2: cos(pi)
  CHECK(mid[7] == doctest::Approx(1.0));          // f=2, y: cos(2pi)
}

TEST_CASE("fail throws a typed error") {
  try {
    fail(ErrorKind::out_of_range, "boom");
    FAIL("unreachable");
  } catch (const Error& e) {
    CHECK(e.kind == ErrorKind::out_of_range);
    CHECK(std::string(e.what()) == "boom");
  }
}
