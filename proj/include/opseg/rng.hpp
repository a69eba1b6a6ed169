/* Copyright 2026 The Opseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef OPSEG_RNG_HPP_
#define OPSEG_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace opseg {

// Seeded RNG with hand-rolled distributions. std::*_distribution output is
// implementation-defined, so every draw here goes through fixed arithmetic
// to keep byte-identical reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1. Rejection-free modulo is fine here:
  // n is always tiny relative to 2^64, bias is < 2^-50.
  std::uint64_t uniform_int(std::uint64_t n) { return engine_() % n; }

  // Standard normal via Box-Muller (both values used, fixed order).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derives an independent stream; used to hand sub-tasks their own RNG
  // without coupling draw counts.
  Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ull); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace opseg

#endif  // OPSEG_RNG_HPP_
