#pragma once

// Deterministic random streams. std::mt19937_64 is fully specified by the
// standard, but the <random> distributions are not, so the distribution
// logic lives here and results are reproducible across compilers.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace ett {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Combines a base seed with a path of stream ids into one well-mixed seed,
// so independent consumers (episode sampling, tuning, image synthesis)
// never share a stream by accident.
inline uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> path) {
  uint64_t h = splitmix64(seed);
  for (uint64_t p : path) h = splitmix64(h ^ splitmix64(p));
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> path) {
    return Rng(mix_seed(seed, path));
  }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Inclusive integer range, unbiased via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
    uint64_t span = uint64_t(hi - lo) + 1;
    if (span == 0) return int64_t(gen_());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
      r = gen_();
    } while (r >= limit);
    return lo + int64_t(r % span);
  }

  // Box-Muller, both uniforms drawn fresh per call (no cached spare, so the
  // stream position is a pure function of the call count).
  double normal() {
    double u1, u2;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct integers from a [lo, hi] too wide to materialize; rejection
  // sampling stays cheap while k is far below the span
  std::vector<int64_t> sample_distinct_sparse(int64_t lo, int64_t hi, size_t k) {
    size_t span = size_t(hi - lo + 1);
    if (k > span) throw std::invalid_argument("Rng: sample larger than range");
    if (span <= 4 * k) return sample_without_replacement(lo, hi, k);
    std::vector<int64_t> out;
    out.reserve(k);
    while (out.size() < k) {
      int64_t v = uniform_int(lo, hi);
      bool fresh = true;
      for (int64_t seen : out)
        if (seen == v) {
          fresh = false;
          break;
        }
      if (fresh) out.push_back(v);
    }
    return out;
  }

  // k distinct integers from [lo, hi], order randomized.
  std::vector<int64_t> sample_without_replacement(int64_t lo, int64_t hi, size_t k) {
    size_t span = size_t(hi - lo + 1);
    if (k > span) throw std::invalid_argument("Rng: sample larger than range");
    // Partial Fisher-Yates over an index pool keeps it O(span) worst case,
    // which is fine at the class counts used here.
    std::vector<int64_t> pool(span);
    for (size_t i = 0; i < span; ++i) pool[i] = lo + int64_t(i);
    std::vector<int64_t> out(k);
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + size_t(uniform_int(0, int64_t(span - i) - 1));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ett
