#include "seqpo/rng.hpp"

#include <cmath>
#include <numbers>

#include "seqpo/errors.hpp"

namespace seqpo {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                       std::uint64_t d) {
  std::uint64_t s = splitmix64(a);
  s = splitmix64(s ^ (b + 0x9e3779b97f4a7c15ULL));
  s = splitmix64(s ^ (c + 0xc2b2ae3d27d4eb4fULL));
  s = splitmix64(s ^ (d + 0x165667b19e3779f9ULL));
  return s;
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw InputError("Rng::below requires n > 0");
  const std::uint64_t zone = n * (~std::uint64_t{0} / n);
  std::uint64_t x = gen_();
  while (x >= zone) x = gen_();
  return x % n;
}

}  // namespace seqpo
