#ifndef SHORTLVLM_RANDOM_HPP
#define SHORTLVLM_RANDOM_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "shortlvlm/linalg.hpp"

namespace shortlvlm {

using Rng = std::mt19937_64;

/// Uniform integer in [0, n). Rejection sampling keeps it unbiased and
/// independent of the standard library's distribution internals.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline Matrix random_normal(Rng& rng, std::size_t rows, std::size_t cols, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Matrix m(rows, cols);
  for (float& v : m.values()) v = dist(rng);
  return m;
}

inline Matrix random_uniform(Rng& rng, std::size_t rows, std::size_t cols, float lo, float hi) {
  Matrix m(rows, cols);
  for (float& v : m.values()) v = static_cast<float>(lo + (hi - lo) * uniform_unit(rng));
  return m;
}

/// Seeded Fisher-Yates.
template <typename T>
void shuffle_in_place(std::vector<T>& items, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_RANDOM_HPP
