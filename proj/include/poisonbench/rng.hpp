#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace poisonbench {

// Seeded generator with hand-rolled distributions. std::mt19937_64 output is
// specified by the standard; the distribution helpers below avoid
// implementation-defined std::*_distribution so that identical seeds give
// identical streams everywhere we build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; consumes two uniforms per pair, caches the second value.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  // Uniform integer in [0, bound). Rejection-free modulo; bias is irrelevant
  // at the scales used here but determinism is not.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::below: zero bound");
    return gen_() % bound;
  }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  // k distinct picks from `pool`, in selection order.
  template <typename T>
  std::vector<T> sample_without_replacement(std::vector<T> pool, std::size_t k) {
    if (k > pool.size()) {
      throw std::invalid_argument("Rng::sample_without_replacement: k exceeds pool");
    }
    std::vector<T> out;
    out.reserve(k);
    std::size_t n = pool.size();
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace poisonbench
