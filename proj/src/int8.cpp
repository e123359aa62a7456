#include "pqd/int8.hpp"

#include <algorithm>

#include "pqd/errors.hpp"

namespace pqd {

std::vector<std::int16_t> center_codes(const QuantTensor& t) {
  std::vector<std::int16_t> out(t.data.size());
  const int z = t.qp.zero_point;
  for (std::size_t i = 0; i < t.data.size(); ++i)
    out[i] = static_cast<std::int16_t>(static_cast<int>(t.data[i]) - z);
  return out;
}

namespace {

std::int32_t dot_i16(const std::int16_t* a, const std::int16_t* b, int n) {
  std::int32_t acc = 0;
  for (int i = 0; i < n; ++i) acc += static_cast<std::int32_t>(a[i]) * b[i];
  return acc;
}

std::uint8_t finish(std::int64_t acc, const Requantizer& rq, int z_out) {
  const std::int32_t scaled = rq.apply(acc);
  const std::int64_t code = static_cast<std::int64_t>(scaled) + z_out;
  return static_cast<std::uint8_t>(std::clamp<std::int64_t>(code, 0, 255));
}

}  // namespace

QuantTensor int8_linear(const QuantTensor& x, const QuantTensor& w,
                        const std::vector<std::int32_t>& bias, const QuantParams& out_qp,
                        ThreadPool* pool) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[1])
    throw InvariantError("int8_linear: incompatible shapes " + shape_str(x.shape) + " vs " +
                         shape_str(w.shape));
  if (!x.qp.valid() || !w.qp.valid() || !out_qp.valid())
    throw InvariantError("int8_linear: missing or invalid quantization parameters");
  const int B = x.shape[0], I = x.shape[1], O = w.shape[0];
  if (I > kMaxInt8ReduceLen)
    throw InvariantError("int8_linear: reduction length " + std::to_string(I) +
                         " exceeds the 32-bit-safe cap " + std::to_string(kMaxInt8ReduceLen));
  if (static_cast<int>(bias.size()) != O)
    throw InvariantError("int8_linear: bias length does not match output count");

  const Requantizer rq = Requantizer::from_ratio(
      static_cast<double>(x.qp.scale) * w.qp.scale / out_qp.scale);
  const std::vector<std::int16_t> xc = center_codes(x);
  const std::vector<std::int16_t> wc = center_codes(w);

  QuantTensor out;
  out.shape = {B, O};
  out.qp = out_qp;
  out.data.resize(static_cast<std::size_t>(B) * O);
  auto rows = [&](int b0, int b1) {
    for (int b = b0; b < b1; ++b) {
      const std::int16_t* xr = xc.data() + static_cast<std::size_t>(b) * I;
      std::uint8_t* yr = out.data.data() + static_cast<std::size_t>(b) * O;
      for (int o = 0; o < O; ++o) {
        const std::int32_t acc = dot_i16(xr, wc.data() + static_cast<std::size_t>(o) * I, I);
        yr[o] = finish(static_cast<std::int64_t>(acc) + bias[static_cast<std::size_t>(o)], rq,
                       out_qp.zero_point);
      }
    }
  };
  if (pool)
    pool->parallel_for(0, B, rows);
  else
    rows(0, B);
  return out;
}

QuantTensor int8_conv2d(const QuantTensor& x, const QuantTensor& w,
                        const std::vector<std::int32_t>& bias, int stride, int pad,
                        const QuantParams& out_qp, ThreadPool* pool) {
  if (x.shape.size() != 4 || w.shape.size() != 4 || x.shape[1] != w.shape[1] ||
      w.shape[2] != w.shape[3])
    throw InvariantError("int8_conv2d: incompatible shapes " + shape_str(x.shape) + " vs " +
                         shape_str(w.shape));
  if (!x.qp.valid() || !w.qp.valid() || !out_qp.valid())
    throw InvariantError("int8_conv2d: missing or invalid quantization parameters");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int F = w.shape[0], k = w.shape[2];
  if (static_cast<std::int64_t>(C) * k * k > kMaxInt8ReduceLen)
    throw InvariantError("int8_conv2d: reduction length exceeds the 32-bit-safe cap");
  if (static_cast<int>(bias.size()) != F)
    throw InvariantError("int8_conv2d: bias length does not match filter count");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw InvariantError("int8_conv2d: non-positive output extent");

  const Requantizer rq = Requantizer::from_ratio(
      static_cast<double>(x.qp.scale) * w.qp.scale / out_qp.scale);
  const std::vector<std::int16_t> xc = center_codes(x);
  const std::vector<std::int16_t> wc = center_codes(w);

  QuantTensor out;
  out.shape = {B, F, Ho, Wo};
  out.qp = out_qp;
  out.data.resize(static_cast<std::size_t>(B) * F * Ho * Wo);
  auto images = [&](int b0, int b1) {
    for (int b = b0; b < b1; ++b) {
      for (int f = 0; f < F; ++f) {
        std::uint8_t* yp = out.data.data() + (static_cast<std::size_t>(b) * F + f) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            std::int32_t acc = 0;
            for (int c = 0; c < C; ++c) {
              const std::int16_t* xp = xc.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
              const std::int16_t* wp = wc.data() + (static_cast<std::size_t>(f) * C + c) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;  // implicit zero padding: x - z_x = 0 there
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  acc += static_cast<std::int32_t>(xp[iy * W + ix]) * wp[ky * k + kx];
                }
              }
            }
            yp[oy * Wo + ox] = finish(static_cast<std::int64_t>(acc) + bias[static_cast<std::size_t>(f)],
                                      rq, out_qp.zero_point);
          }
        }
      }
    }
  };
  if (pool)
    pool->parallel_for(0, B, images);
  else
    images(0, B);
  return out;
}

void int8_relu_inplace(QuantTensor& x) {
  const auto z = static_cast<std::uint8_t>(x.qp.zero_point);
  for (std::uint8_t& q : x.data) q = std::max(q, z);
}

QuantTensor int8_maxpool2(const QuantTensor& x) {
  if (x.shape.size() != 4) throw InvariantError("int8_maxpool2: expected [B,C,H,W]");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (H < 2 || W < 2) throw InvariantError("int8_maxpool2: spatial extent below window size");
  const int Ho = H / 2, Wo = W / 2;
  QuantTensor out;
  out.shape = {B, C, Ho, Wo};
  out.qp = x.qp;
  out.data.resize(static_cast<std::size_t>(B) * C * Ho * Wo);
  std::size_t oi = 0;
  for (int bc = 0; bc < B * C; ++bc) {
    const std::uint8_t* xp = x.data.data() + static_cast<std::size_t>(bc) * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++oi) {
        std::uint8_t m = xp[(2 * oy) * W + 2 * ox];
        m = std::max(m, xp[(2 * oy) * W + 2 * ox + 1]);
        m = std::max(m, xp[(2 * oy + 1) * W + 2 * ox]);
        m = std::max(m, xp[(2 * oy + 1) * W + 2 * ox + 1]);
        out.data[oi] = m;
      }
  }
  return out;
}

QuantTensor int8_flatten(const QuantTensor& x) {
  if (x.shape.size() < 2) throw InvariantError("int8_flatten: expected a batch dimension");
  QuantTensor out = x;
  int rest = 1;
  for (std::size_t i = 1; i < x.shape.size(); ++i) rest *= x.shape[i];
  out.shape = {x.shape[0], rest};
  return out;
}

}  // namespace pqd
