#pragma once

#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <string_view>

namespace psalab {

// 64-bit FNV-1a, used for content hashes and seed derivation.
inline uint64_t fnv1a(const void* data, size_t n,
                      uint64_t h = 14695981039346656037ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

// splitmix64 finalizer
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Every random stream in a run is keyed off one master seed by component
// name (and optionally an index), so runs are reproducible end to end.
inline uint64_t derive_seed(uint64_t master, std::string_view component) {
  return mix64(master ^ fnv1a(component));
}

inline uint64_t derive_seed(uint64_t master, std::string_view component,
                            uint64_t index) {
  return mix64(derive_seed(master, component) +
               0x632be59bd9b4e019ull * (index + 1));
}

struct Rng {
  std::mt19937_64 gen;

  explicit Rng(uint64_t seed) : gen(seed) {}

  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(gen);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen);
  }
  // inclusive bounds
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen);
  }
  uint64_t next_u64() { return gen(); }
};

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace psalab
