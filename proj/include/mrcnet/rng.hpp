#pragma once

#include <cmath>
#include <cstdint>

#include "mrcnet/common.hpp"

namespace mrc {

// splitmix64 step, also used to derive independent per-item seeds from a
// master seed via a counter (seed_for(master, i) is order-independent).
inline u64 splitmix64(u64& state) {
  u64 z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline u64 derive_seed(u64 master, u64 counter) {
  u64 s = master + 0x9E3779B97F4A7C15ULL * (counter + 1);
  return splitmix64(s);
}

// xoshiro256** with hand-rolled distributions. The standard <random>
// distributions are implementation-defined, which would break the
// bit-for-bit reproducibility contract across toolchains.
class Rng {
 public:
  explicit Rng(u64 seed) {
    u64 sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  u64 next_u64() {
    const u64 result = rotl(s_[1] * 5, 7) * 9;
    const u64 t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds; modulo bias is irrelevant here, determinism is not
  i64 uniform_int(i64 lo, i64 hi) {
    if (hi < lo) throw UsageError("uniform_int: empty range");
    u64 span = static_cast<u64>(hi - lo) + 1;
    return lo + static_cast<i64>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Knuth's product method; fine for the small means used here.
  i64 poisson(double lambda) {
    double limit = std::exp(-lambda);
    double prod = uniform();
    i64 k = 0;
    while (prod > limit) {
      ++k;
      prod *= uniform();
    }
    return k;
  }

  template <typename It>
  void shuffle(It first, It last) {
    i64 n = static_cast<i64>(last - first);
    for (i64 i = n - 1; i > 0; --i) {
      i64 j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  static u64 rotl(u64 x, int k) { return (x << k) | (x >> (64 - k)); }

  u64 s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mrc
