#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace nr {

// Deterministic random source. All distributions are hand-rolled on top of
// mt19937_64 so output bytes do not depend on the standard-library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // splitmix64-style combinator used to derive stream seeds, e.g.
  // mix(run_seed, epoch) or mix(run_seed, hash(tensor_name)).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);
  static std::uint64_t hash_str(const std::string& s);

  std::uint64_t next() { return gen_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one spare value is cached.
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // k distinct values from [0, n) in draw order (k <= n).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nr
