#ifndef SAE_RNG_HPP
#define SAE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace sae {

// Deterministic RNG built on mt19937_64. The distribution transforms are
// hand-rolled because the std:: distributions are implementation-defined and
// would break reproducibility of logged losses across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return double(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {  // [0, n)
    return int(eng_() % std::uint64_t(n));
  }

  // Standard normal via Box-Muller; one spare cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Standard Gumbel noise g = -log(-log(u)); u is clamped away from 0 and 1
  // so the result is always finite.
  double gumbel() {
    double u = uniform();
    if (u < 1e-20) u = 1e-20;
    if (u > 1.0 - 1e-7) u = 1.0 - 1e-7;
    return -std::log(-std::log(u));
  }

  // Derives an independent stream, e.g. one per subject or per phantom.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 round over the pair
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sae

#endif  // SAE_RNG_HPP
