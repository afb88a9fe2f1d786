#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace pcrobust {

/// Seeded random source with explicitly-specified transforms.
///
/// The mt19937_64 engine is standardized, and the uniform/normal transforms
/// below avoid std::*_distribution (whose output is implementation-defined),
/// so a given seed produces the same stream on every platform. Everything
/// stochastic in the toolkit draws from one of these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (the spare value is cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform index in [0, n). Modulo bias is ~n/2^64 and ignored.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

  /// Random sign, +1 or -1.
  double rademacher() { return (gen_() & 1u) ? 1.0 : -1.0; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pcrobust
