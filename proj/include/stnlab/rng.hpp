#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace stnlab {

// All randomness in the library flows from one root seed through named
// streams: stream state = f(seed, name [, index]). Streams are independent,
// so adding a new consumer never perturbs the draws of an existing one.
// Distributions are hand-rolled on top of splitmix64 to keep every draw
// bit-reproducible across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t state) : state_(state) {
    // burn-in so near-zero seeds still start well mixed
    splitmix64(state_);
  }

  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t s = seed;
    std::uint64_t a = splitmix64(s);
    s ^= fnv1a64(name);
    std::uint64_t b = splitmix64(s);
    s ^= index * 0x9e3779b97f4a7c15ull;
    std::uint64_t c = splitmix64(s);
    return Rng(a ^ (b << 1) ^ c);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi], inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    // rejection sampling keeps the draw exactly uniform
    std::uint64_t limit = ~0ull - (~0ull % span + 1) % span;
    std::uint64_t x = next_u64();
    while (x > limit) x = next_u64();
    return lo + static_cast<std::int64_t>(x % span);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace stnlab
