#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pqd/tensor.hpp"

namespace pqd {

/// Uniform affine quantization metadata: real value = scale * (q - zero_point),
/// q an unsigned 8-bit code in [0, 255].
struct QuantParams {
  float scale = 1.0f;
  int zero_point = 0;

  bool valid() const { return scale > 0.0f && zero_point >= 0 && zero_point <= 255; }
};

/// Round half to even. The process rounding mode is never changed, so
/// nearbyint is exactly this everywhere we run.
inline float round_even(float x) { return std::nearbyintf(x); }
inline double round_even(double x) { return std::nearbyint(x); }

/// q = clip(round(x / s) + z, 0, 255).
std::uint8_t quantize(float x, const QuantParams& qp);

/// s * (q - z).
float dequantize(std::uint8_t q, const QuantParams& qp);

/// True when round(x / s) + z lands inside [0, 255] before clipping; the
/// straight-through estimator passes gradient only there.
bool quant_in_range(float x, const QuantParams& qp);

/// 8-bit tensor plus the parameters it was quantized under.
struct QuantTensor {
  std::vector<int> shape;
  std::vector<std::uint8_t> data;
  QuantParams qp;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
};

QuantTensor quantize_tensor(const Tensor& x, const QuantParams& qp);
Tensor dequantize_tensor(const QuantTensor& q);

/// Tracks the value range of a tensor site during calibration or training.
/// MinMax only expands (post-training calibration); Ema tracks a moving
/// range (activation sites during quantization-aware training).
struct Observer {
  enum class Mode { MinMax, Ema };

  Mode mode = Mode::MinMax;
  float decay = 0.99f;
  float min = 0.0f;
  float max = 0.0f;
  bool seen = false;

  void update(std::span<const float> values);
  void update(const Tensor& t) { update(std::span<const float>(t.data(), static_cast<std::size_t>(t.size()))); }

  /// Affine parameters for the observed range: s = (max - min) / 255,
  /// z = clip(round(-min / s), 0, 255). The range is first widened to
  /// include zero so that 0.0 is always exactly representable. A degenerate
  /// range (min == max == v) falls back to s = max(|v|, 1) / 255 with the
  /// grid anchored so v itself stays representable.
  QuantParams qparams() const;
};

/// Affine parameters straight from a [lo, hi] range (same rules as Observer).
QuantParams qparams_from_range(float lo, float hi);

/// Quantize-dequantize module attached to a tensor site in the forward pass.
struct FakeQuantNode {
  QuantParams qp;
  bool enabled = false;
};

/// out = dequantize(quantize(x)) elementwise; identity when disabled.
Tensor fake_quant_forward(const Tensor& x, const FakeQuantNode& node);

/// Fixed-point requantization multiplier. The float ratio
/// s_in * s_w / s_out is folded once into a 32-bit mantissa in
/// [2^30, 2^31) and a right shift; the hot loop then stays integer-only.
/// Rounding at the shift is half-to-even.
struct Requantizer {
  std::int32_t mantissa = 0;
  int shift = 0;  // total arithmetic right shift applied to acc * mantissa

  static Requantizer from_ratio(double ratio);
  std::int32_t apply(std::int64_t acc) const;
};

/// Approximate multiplicative size reduction of pruning to sparsity rho
/// combined with a bits_from -> bits_to precision change.
double compression_estimate(double rho, int bits_from = 32, int bits_to = 8);

/// (delta^2 / 12) * active_count: expected squared norm of uniform
/// quantization noise over the active weight set.
double quant_noise_bound(std::int64_t active_count, double delta);

}  // namespace pqd
