#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pqd {

/// Deterministic random source. All randomness in a run flows from one
/// 64-bit seed through named sub-streams ("init", "data", "quant", ...),
/// so stages can be reproduced independently. Value mapping is hand-rolled
/// on top of mt19937_64 because std distributions are not bit-stable
/// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

  /// Uniform integer in [0, n), n > 0. Rejection sampling keeps the
  /// mapping unbiased and platform-stable.
  std::uint64_t below(std::uint64_t n);

  /// In-place Fisher-Yates shuffle with a pinned visit order.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Derives the seed of a named sub-stream from the run seed.
std::uint64_t substream_seed(std::uint64_t run_seed, std::string_view name);

inline Rng substream(std::uint64_t run_seed, std::string_view name) {
  return Rng(substream_seed(run_seed, name));
}

}  // namespace pqd
