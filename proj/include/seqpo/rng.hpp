#pragma once

#include <cstdint>
#include <random>

namespace seqpo {

// Derives an independent stream seed from up to four values (splitmix64
// finalizer applied to a running combination). Used to give every
// (step, query, response) its own reproducible stream.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                       std::uint64_t d = 0);

// mt19937_64 with hand-rolled conversions. The standard pins the engine
// output exactly, but the <random> distributions are implementation-defined,
// so all conversions to doubles/integers happen here. This keeps sampling
// bitwise reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller with a cached spare.
  double gaussian();

  // Uniform integer in [0, n); n must be > 0. Rejection sampling, unbiased.
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace seqpo
