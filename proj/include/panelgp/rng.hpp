#pragma once

// Seedable counter-based generator used everywhere randomness is needed.
//
// Stream definition (SplitMix64): the i'th raw draw from seed s is
//   mix(s + (i+1) * 0x9E3779B97F4A7C15)
// where mix is the 64-bit finalizer
//   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//   z ^= z >> 27; z *= 0x94D049BB133111EB;
//   z ^= z >> 31;
// Uniform doubles take the top 53 bits. Normals use Box-Muller (two uniforms
// per pair, the second value cached), gammas Marsaglia-Tsang. The algorithm
// is spelled out so ports to other languages can reproduce the stream
// structure; bit-exact equality across languages is not promised.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace panelgp {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1], safe as a log argument.
  double uniform_pos() { return 1.0 - uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double exponential() { return -std::log(uniform_pos()); }

  // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 boosted through
  // Gamma(shape + 1) * U^{1/shape}.
  double gamma(double shape) {
    if (!(shape > 0.0)) {
      throw std::domain_error("Rng::gamma: shape must be positive");
    }
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
        return d * v;
      }
    }
  }

  std::vector<double> dirichlet(const std::vector<double>& concentration) {
    std::vector<double> w(concentration.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = concentration[i] == 1.0 ? exponential() : gamma(concentration[i]);
      total += w[i];
    }
    for (double& v : w) v /= total;
    return w;
  }

  // Uniform index in [0, n).
  std::size_t bounded(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % n);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[bounded(i)]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace panelgp
