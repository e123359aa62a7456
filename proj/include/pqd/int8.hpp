#pragma once

#include <cstdint>
#include <vector>

#include "pqd/quant.hpp"
#include "pqd/threadpool.hpp"

namespace pqd {

/// Hard cap on the reduction length of one integer dot product: with 8-bit
/// operands and centered int16 values the worst-case accumulator magnitude
/// is 255 * 255 * 2^15 < 2^31, so 32-bit accumulation cannot overflow.
inline constexpr int kMaxInt8ReduceLen = 1 << 15;

/// acc[b,o] = sum_i (xq - z_x) * (wq - z_w) + bias[o], 32-bit accumulation;
/// out = clip(requantize(acc * s_x * s_w / s_out) + z_out). No float in the
/// per-element loop. x is [B,I] codes, w is [O,I] codes, bias is int32 at
/// scale s_x * s_w.
QuantTensor int8_linear(const QuantTensor& x, const QuantTensor& w,
                        const std::vector<std::int32_t>& bias, const QuantParams& out_qp,
                        ThreadPool* pool = nullptr);

/// Convolution analog of int8_linear with the identical requantization
/// contract. x is [B,C,H,W] codes, w is [F,C,k,k] codes.
QuantTensor int8_conv2d(const QuantTensor& x, const QuantTensor& w,
                        const std::vector<std::int32_t>& bias, int stride, int pad,
                        const QuantParams& out_qp, ThreadPool* pool = nullptr);

/// ReLU in the quantized domain: q' = max(q, z). Exact counterpart of
/// fake_quant(relu(x)) because the zero-point is the code of 0.0.
void int8_relu_inplace(QuantTensor& x);

/// 2x2/stride-2 max pool on codes; order-preserving, so identical to
/// pooling the dequantized values.
QuantTensor int8_maxpool2(const QuantTensor& x);

QuantTensor int8_flatten(const QuantTensor& x);

/// Centered int16 copy (q - zero_point) used to keep the inner loops on
/// 16-bit operands.
std::vector<std::int16_t> center_codes(const QuantTensor& t);

}  // namespace pqd
