#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pqd/param.hpp"

namespace pqd {

/// Packed one-bit-per-weight mask.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::int64_t n, bool value = false);

  bool get(std::int64_t i) const {
    return (words_[static_cast<std::size_t>(i >> 6)] >> (i & 63)) & 1u;
  }
  void set(std::int64_t i, bool v) {
    const std::size_t w = static_cast<std::size_t>(i >> 6);
    const std::uint64_t bit = std::uint64_t(1) << (i & 63);
    if (v)
      words_[w] |= bit;
    else
      words_[w] &= ~bit;
  }
  std::int64_t size() const { return n_; }
  std::int64_t popcount() const;
  bool empty() const { return n_ == 0; }

  const std::vector<std::uint64_t>& words() const { return words_; }
  std::vector<std::uint64_t>& words() { return words_; }

 private:
  std::int64_t n_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Binary masks for the maskable parameter set (convolution and linear
/// weight matrices; biases are never pruned), with the target sparsity and
/// the global magnitude threshold that produced them. Masks for
/// non-maskable parameters stay empty.
struct PruneMask {
  std::vector<BitMask> per_param;  // aligned with the parameter vector
  float rho = 0.0f;
  float gamma = 0.0f;

  std::int64_t total_bits() const;
  std::int64_t popcount() const;
  float achieved_sparsity() const;
};

/// Global magnitude threshold for sparsity rho. gamma is the smallest kept
/// magnitude when the ceil(rho * n) smallest weights (pooled across every
/// maskable parameter) are dropped; keep_count is the exact retention
/// budget used to break ties.
struct GlobalThreshold {
  float gamma = 0.0f;
  std::int64_t keep_count = 0;
  std::int64_t total = 0;
};

GlobalThreshold compute_global_threshold(const std::vector<Parameter>& params, float rho);

/// Pure threshold mask: bit set iff |W_j| >= gamma.
PruneMask build_mask(const std::vector<Parameter>& params, float gamma);

/// Threshold mask with the deterministic tie rule: every |W_j| > gamma is
/// kept; weights exactly at gamma are kept in (parameter index, flat index)
/// order until keep_count is reached.
PruneMask build_mask(const std::vector<Parameter>& params, const GlobalThreshold& th, float rho);

/// W_j <- M_j * W_j on every masked parameter. Idempotent.
void apply_mask(std::vector<Parameter>& params, const PruneMask& mask);

/// Per-weight first-order saliency |g_j * W_j| over maskable parameters.
/// Diagnostic only; never drives the mask.
struct SaliencyReport {
  std::vector<std::vector<float>> scores;  // per maskable parameter, flat
  float q25 = 0.0f, q50 = 0.0f, q75 = 0.0f;
  std::int64_t count = 0;
};

SaliencyReport taylor_saliency(const std::vector<Parameter>& params);

}  // namespace pqd
