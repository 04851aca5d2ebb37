// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace uvdt {

// All randomness in the library flows through these helpers so that results
// are pinned by this code, not by implementation-defined std:: distributions.
using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(uint64_t seed) {
  uint64_t s = seed;
  std::seed_seq seq{splitmix64(s), splitmix64(s), splitmix64(s), splitmix64(s)};
  return Rng(seq);
}

// Derives an independent stream from (seed, a, b), e.g. per (epoch, instance).
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t s = seed;
  uint64_t h = splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ULL;
  h ^= splitmix64(s);
  s ^= b + 0xc2b2ae3d27d4eb4fULL;
  h ^= splitmix64(s);
  return h;
}

// Uniform in [0, n) without implementation-defined behaviour (Lemire's method).
inline size_t rand_index(Rng& g, size_t n) {
  return static_cast<size_t>((static_cast<__uint128_t>(g()) * n) >> 64);
}

// Uniform double in [0, 1) with 53 random bits.
inline double rand_unit(Rng& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double rand_range(Rng& g, double lo, double hi) {
  return lo + (hi - lo) * rand_unit(g);
}

inline bool rand_bernoulli(Rng& g, double p) { return rand_unit(g) < p; }

// Box-Muller; consumes exactly two draws per call.
inline double rand_normal(Rng& g) {
  double u1 = rand_unit(g);
  double u2 = rand_unit(g);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

template <typename T>
void fisher_yates(std::vector<T>& v, Rng& g) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = rand_index(g, i);
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<int> rand_permutation(size_t n, Rng& g) {
  std::vector<int> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
  fisher_yates(p, g);
  return p;
}

}  // namespace uvdt
