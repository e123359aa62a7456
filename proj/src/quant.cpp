#include "pqd/quant.hpp"

#include <algorithm>
#include <cmath>

#include "pqd/errors.hpp"

namespace pqd {

std::uint8_t quantize(float x, const QuantParams& qp) {
  // The quotient is taken in double so the half-step round-trip bound holds
  // without float-division slack.
  const double pre = round_even(static_cast<double>(x) / qp.scale) + qp.zero_point;
  if (pre <= 0.0) return 0;
  if (pre >= 255.0) return 255;
  return static_cast<std::uint8_t>(pre);
}

float dequantize(std::uint8_t q, const QuantParams& qp) {
  return qp.scale * static_cast<float>(static_cast<int>(q) - qp.zero_point);
}

bool quant_in_range(float x, const QuantParams& qp) {
  const double pre = round_even(static_cast<double>(x) / qp.scale) + qp.zero_point;
  return pre >= 0.0 && pre <= 255.0;
}

QuantTensor quantize_tensor(const Tensor& x, const QuantParams& qp) {
  QuantTensor out;
  out.shape = x.shape();
  out.qp = qp;
  out.data.resize(static_cast<std::size_t>(x.size()));
  for (std::int64_t i = 0; i < x.size(); ++i) out.data[static_cast<std::size_t>(i)] = quantize(x[i], qp);
  return out;
}

Tensor dequantize_tensor(const QuantTensor& q) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.data.size(); ++i) out[static_cast<std::int64_t>(i)] = dequantize(q.data[i], q.qp);
  return out;
}

void Observer::update(std::span<const float> values) {
  if (values.empty()) return;
  float lo = values[0];
  float hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!seen) {
    min = lo;
    max = hi;
    seen = true;
    return;
  }
  if (mode == Mode::MinMax) {
    min = std::min(min, lo);
    max = std::max(max, hi);
  } else {
    min = decay * min + (1.0f - decay) * lo;
    max = decay * max + (1.0f - decay) * hi;
  }
}

QuantParams qparams_from_range(float lo, float hi) {
  if (lo > hi) throw InvariantError("observer range inverted: min > max");
  QuantParams qp;
  if (lo == hi) {
    // Degenerate range: keep the constant representable. Zero gets a
    // centered zero-point; any other constant anchors the grid at an
    // endpoint so that v = s * (q - z) holds for an integer q.
    const float v = lo;
    if (v == 0.0f) {
      qp.scale = 1.0f / 255.0f;
      qp.zero_point = 128;
      return qp;
    }
    const float floor_scale = std::max(std::fabs(v), 1.0f) / 255.0f;
    float d = round_even(v / floor_scale);
    if (d == 0.0f) d = v > 0.0f ? 1.0f : -1.0f;
    qp.scale = v / d;
    qp.zero_point = d >= 0.0f ? 0 : 255;
    return qp;
  }
  // Widen to include zero so 0.0 is always on the grid.
  lo = std::min(lo, 0.0f);
  hi = std::max(hi, 0.0f);
  qp.scale = (hi - lo) / 255.0f;
  // z = round(-lo / s) evaluated as the exact ratio in double; dividing by
  // the float-rounded scale would miss ties like 127.5.
  const double z = round_even(-static_cast<double>(lo) * 255.0 /
                              (static_cast<double>(hi) - static_cast<double>(lo)));
  qp.zero_point = static_cast<int>(std::clamp(z, 0.0, 255.0));
  return qp;
}

QuantParams Observer::qparams() const {
  if (!seen) throw InvariantError("observer has seen no data");
  return qparams_from_range(min, max);
}

Tensor fake_quant_forward(const Tensor& x, const FakeQuantNode& node) {
  if (!node.enabled) return x;
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = dequantize(quantize(x[i], node.qp), node.qp);
  return out;
}

Requantizer Requantizer::from_ratio(double ratio) {
  if (!(ratio > 0.0)) throw InvariantError("requantization ratio must be positive");
  int exp = 0;
  const double frac = std::frexp(ratio, &exp);  // ratio = frac * 2^exp, frac in [0.5, 1)
  auto mant = static_cast<std::int64_t>(round_even(frac * 2147483648.0));  // frac * 2^31
  if (mant == (std::int64_t(1) << 31)) {
    mant >>= 1;
    exp += 1;
  }
  Requantizer r;
  r.mantissa = static_cast<std::int32_t>(mant);
  r.shift = 31 - exp;
  if (r.shift <= 0) throw InvariantError("requantization ratio too large for fixed-point form");
  return r;
}

std::int32_t Requantizer::apply(std::int64_t acc) const {
  // Saturate the accumulator to 32 bits; |acc| * mantissa then fits in 63 bits.
  acc = std::clamp<std::int64_t>(acc, INT32_MIN, INT32_MAX);
  const std::int64_t prod = acc * mantissa;
  if (shift > 62) return 0;  // magnitude below half a grid step
  std::int64_t q = prod >> shift;  // arithmetic shift: floor division
  const std::int64_t rem = prod - (q << shift);
  const std::int64_t half = std::int64_t(1) << (shift - 1);
  if (rem > half || (rem == half && (q & 1))) ++q;
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(q, INT32_MIN, INT32_MAX));
}

double compression_estimate(double rho, int bits_from, int bits_to) {
  if (rho < 0.0 || rho >= 1.0) throw ConfigError("sparsity must lie in [0, 1)");
  if (bits_from <= 0 || bits_to <= 0) throw ConfigError("bit widths must be positive");
  return (static_cast<double>(bits_from) / bits_to) / (1.0 - rho);
}

double quant_noise_bound(std::int64_t active_count, double delta) {
  if (!(delta > 0.0)) throw ConfigError("quantization step must be positive");
  if (active_count < 0) throw ConfigError("active count must be non-negative");
  return delta * delta / 12.0 * static_cast<double>(active_count);
}

}  // namespace pqd
