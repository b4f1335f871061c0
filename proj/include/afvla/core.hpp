#pragma once

// Shared scalar-templated dense types, deterministic RNG, and error kinds.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace afvla {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Vecd = Vec<double>;
using Matf = Mat<float>;
using Vecf = Vec<float>;

// ---------------------------------------------------------------- errors

enum class ErrorKind {
  unknown_key,
  out_of_range,
  bad_enum,
  io_error,
  schema_mismatch,
  hash_mismatch,
  view_out_of_range,
  placement_failure,
  shape_error,
  vocab_error,
  view_count_mismatch,
  incompatible_flags,
  divergence,
  missing_warmup,
  usage,
};

struct Error : std::runtime_error {
  ErrorKind kind;
  Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }

// ---------------------------------------------------------------- hashing

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------- rng
//
// xoshiro256** with splitmix64 seeding. Uniform and normal draws are
// implemented here (not via std::*_distribution) so that streams are
// bit-reproducible across standard libraries. Draw order is part of the
// reproducibility contract wherever a function documents it.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = x = splitmix64(x);
    has_spare_ = false;
  }

  // Derives an independent stream, e.g. per parameter tensor or per episode.
  static Rng stream(std::uint64_t seed, const std::string& tag) {
    return Rng(splitmix64(seed ^ fnv1a(tag)));
  }
  static Rng stream(std::uint64_t seed, std::uint64_t tag) {
    return Rng(splitmix64(seed ^ splitmix64(tag)));
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // i in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; one spare is cached, so draws come in
  // a fixed order of underlying uniforms.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void fill_normal(Mat<T>& m, double stddev) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = T(stddev * normal());
  }

 private:
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ------------------------------------------------- positional codes
//
// Fixed 8-dim sinusoidal code of a point in the unit square; shared by the
// patch feature renderer and the affordance decoder so both sides of the
// query-patch grounding see the same spatial encoding.

inline void sinusoidal_code8(double x, double y, double* out) {
  const double two_pi = 6.283185307179586476925286766559;
  const double freqs[2] = {1.0, 2.0};
  int idx = 0;
  for (double f : freqs) {
    out[idx++] = std::sin(two_pi * f * x);
    out[idx++] = std::cos(two_pi * f * x);
    out[idx++] = std::sin(two_pi * f * y);
    out[idx++] = std::cos(two_pi * f * y);
  }
}

}  // namespace afvla
