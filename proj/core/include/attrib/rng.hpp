#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

namespace attrib {

// SplitMix64 finalizer (Steele, Lea & Flood). Used both as the generator step
// and as the seed-mixing function, so every random stream in the library is
// a pure function of 64-bit integers.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed for task `index` of a run seeded with
// `master`. Stable across platforms and worker counts.
constexpr std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return splitmix64_mix(splitmix64_mix(master ^ 0x6a09e667f3bcc909ULL) +
                        0x9e3779b97f4a7c15ULL * (index + 1));
}

// 64-bit FNV-1a, for turning stable string task ids into seed indices.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : text) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64_mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits; exact, no rounding.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  // Uniform in [-1, 1); exact.
  double symmetric() noexcept { return 2.0 * uniform() - 1.0; }

  // Unbiased integer in [0, bound) by rejection; bound > 0.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % bound;
  }

  bool coin() noexcept { return (next() >> 63) != 0; }

  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  SplitMix64 rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  return perm;
}

}  // namespace attrib
