#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace astra {

// Deterministic random source.  All distribution transforms are implemented
// explicitly (instead of std:: distributions, whose algorithms are
// implementation-defined) so that a given seed produces the same stream on
// every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).  Rejection-free modulo would bias; use
  // rejection sampling on the top range.
  std::uint64_t below(std::uint64_t n);

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller (explicit, portable).  Caches the
  // second variate.
  double normal();

  // Index into an (unnormalized) discrete distribution by inverse CDF.
  int categorical(const std::vector<double>& weights);

  // In-place Fisher-Yates shuffle of an index vector.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stateless 64-bit mixing hash used to derive independent stream seeds from
// (base seed, structural indices).  splitmix64 finalizer applied over the
// chained words; order-sensitive.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0x9e3779b97f4a7c15ULL,
                       std::uint64_t c = 0xbf58476d1ce4e5b9ULL,
                       std::uint64_t d = 0x94d049bb133111ebULL);

}  // namespace astra
