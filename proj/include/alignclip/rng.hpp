#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace alignclip {

// Deterministic random stream. splitmix64 core plus a hand-rolled Box-Muller
// transform; std::normal_distribution is implementation-defined, so rolling
// our own keeps every artifact bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // unbiased integer in [0, n)
  uint64_t below(uint64_t n) {
    uint64_t lim = ~uint64_t{0} - ~uint64_t{0} % n;
    uint64_t x = next_u64();
    while (x >= lim) x = next_u64();
    return x % n;
  }

  // Fisher-Yates
  template <class T>
  void shuffle(std::vector<T>& xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent substream seed, e.g. one per epoch.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  Rng r(seed ^ (0x632be59bd9b4e019ULL * (stream + 1)));
  return r.next_u64();
}

}  // namespace alignclip
