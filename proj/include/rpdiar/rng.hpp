// Copyright (c) 2026 The rpdiar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef RPDIAR_RNG_HPP_
#define RPDIAR_RNG_HPP_

// Deterministic random number utilities. The standard distributions are
// implementation-defined, so every draw used by the library goes through the
// helpers below to keep seeded runs reproducible across toolchains.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace rpdiar {

// Stateless 64-bit mixer (splitmix64). Used both as a seed deriver and as a
// counter-based generator for the synthetic feature fields.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b) ^ mix64(c));
}

// Uniform double in [0, 1) with 53 random bits.
inline double to_unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n) without modulo bias.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t r = engine_();
      if (r >= threshold) return r % n;
    }
  }

  double uniform() { return to_unit_double(engine_()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller on (0,1] uniforms.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double exponential(double mean) { return -mean * std::log(1.0 - uniform()); }

  double log_normal(double median, double log_sigma) {
    return median * std::exp(log_sigma * gaussian());
  }

  // First `k` entries of a Fisher-Yates shuffle over `items`.
  template <typename T>
  std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t k) {
    if (k > items.size()) k = items.size();
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(bounded(items.size() - i));
      std::swap(items[i], items[j]);
    }
    items.resize(k);
    return items;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = 0; i + 1 < items.size(); ++i) {
      std::size_t j = i + static_cast<std::size_t>(bounded(items.size() - i));
      std::swap(items[i], items[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Counter-based gaussian: a deterministic function of its counters, usable
// concurrently and order-independently.
inline double hash_gaussian(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                            std::uint64_t c) {
  std::uint64_t h1 = mix64(mix64(seed, a), mix64(b, c));
  std::uint64_t h2 = mix64(h1);
  double u1 = 1.0 - to_unit_double(h1);
  double u2 = to_unit_double(h2);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return to_unit_double(mix64(mix64(seed, a), b));
}

}  // namespace rpdiar

#endif  // RPDIAR_RNG_HPP_
