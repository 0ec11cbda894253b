#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mmdg {

/// splitmix64 finalizer over (master, index). Stream i never depends on how many
/// other streams were derived.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Seeded generator with platform-independent sampling (the standard
/// distributions are implementation-defined, so they are not used here).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmdg
