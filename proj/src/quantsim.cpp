#include "dqkd/quantsim.hpp"

#include <algorithm>
#include <limits>

namespace dqkd {

QuantParams compute_qparams(double alpha, double beta, int bits, QuantMode mode) {
  if (!std::isfinite(alpha) || !std::isfinite(beta)) fail("compute_qparams: non-finite bounds");
  if (alpha == beta) fail("compute_qparams: degenerate range");
  if (alpha > beta) std::swap(alpha, beta);
  if (bits < 2 || bits > 8) fail("compute_qparams: bits must be in [2, 8]");

  QuantParams qp;
  qp.bits = bits;
  qp.mode = mode;
  if (mode == QuantMode::affine_unsigned) {
    qp.qmin = 0;
    qp.qmax = (1 << bits) - 1;
    qp.scale = (beta - alpha) / (qp.qmax - qp.qmin);
    const double z = qp.qmin - round_half_even(alpha / qp.scale);
    qp.zero_point = static_cast<std::int32_t>(std::clamp(
        z, static_cast<double>(qp.qmin), static_cast<double>(qp.qmax)));
  } else {
    const double m = std::max(std::abs(alpha), std::abs(beta));
    qp.qmax = (1 << (bits - 1)) - 1;
    qp.qmin = -qp.qmax;
    qp.scale = m / qp.qmax;
    qp.zero_point = 0;
  }
  if (!(qp.scale > 0.0) || !std::isfinite(qp.scale))
    fail("compute_qparams: invalid scale from range [" + std::to_string(alpha) + ", " +
         std::to_string(beta) + "]");
  qp.fmin = qp.scale * (qp.qmin - qp.zero_point);
  qp.fmax = qp.scale * (qp.qmax - qp.zero_point);
  return qp;
}

IntTensor quantized_conv2d(const IntTensor& x_q, const IntTensor& w_q,
                           const std::vector<std::int32_t>& bias_q, const QuantParams& qp_out,
                           int stride, int pad) {
  const auto& x = x_q.q;
  const auto& w = w_q.q;
  if (x.rank() != 3) fail("quantized_conv2d: input must be CxHxW");
  if (w.rank() != 4) fail("quantized_conv2d: weights must be OxCxKxK");
  if (stride < 1 || pad < 0) fail("quantized_conv2d: invalid stride/pad");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != C) fail("quantized_conv2d: channel mismatch");
  if (!bias_q.empty() && static_cast<int>(bias_q.size()) != O)
    fail("quantized_conv2d: bias size mismatch");
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0) fail("quantized_conv2d: zero-sized output");

  const std::int64_t zx = x_q.qp.zero_point;
  const std::int64_t zw = w_q.qp.zero_point;
  const double multiplier = x_q.qp.scale * w_q.qp.scale / qp_out.scale;
  constexpr std::int64_t kAccMax = std::numeric_limits<std::int32_t>::max();
  constexpr std::int64_t kAccMin = std::numeric_limits<std::int32_t>::min();

  IntTensor out{TensorT<std::int32_t>({O, OH, OW}), qp_out};
  for (int o = 0; o < O; ++o) {
    const std::int64_t b = bias_q.empty() ? 0 : bias_q[static_cast<std::size_t>(o)];
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        std::int64_t acc = b;
        const int ih0 = oh * stride - pad;
        const int iw0 = ow * stride - pad;
        for (int c = 0; c < C; ++c)
          for (int kh = 0; kh < KH; ++kh) {
            const int ih = ih0 + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < KW; ++kw) {
              const int iw = iw0 + kw;
              if (iw < 0 || iw >= W) continue;
              acc += (static_cast<std::int64_t>(x(c, ih, iw)) - zx) *
                     (static_cast<std::int64_t>(w(o, c, kh, kw)) - zw);
            }
          }
        if (acc > kAccMax || acc < kAccMin)
          fail("quantized_conv2d: 32-bit accumulator overflow at output (" + std::to_string(o) +
               "," + std::to_string(oh) + "," + std::to_string(ow) + ")");
        const double v = round_half_even(static_cast<double>(acc) * multiplier + qp_out.zero_point);
        out.q(o, oh, ow) = static_cast<std::int32_t>(
            std::clamp(v, static_cast<double>(qp_out.qmin), static_cast<double>(qp_out.qmax)));
      }
    }
  }
  return out;
}

std::uint16_t float_to_half_bits(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t fexp = (x >> 23) & 0xFFu;
  std::uint32_t mant = x & 0x7FFFFFu;
  if (fexp == 0xFFu)  // inf or nan
    return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u | (mant >> 13) : 0u));
  const int exp = static_cast<int>(fexp) - 127 + 15;
  if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);  // overflow to inf
  if (exp <= 0) {
    if (exp < -10) return static_cast<std::uint16_t>(sign);  // underflow to zero
    mant |= 0x800000u;
    const int shift = 14 - exp;
    std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return static_cast<std::uint16_t>(sign | half_mant);
  }
  std::uint16_t h =
      static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13));
  const std::uint32_t rem = mant & 0x1FFFu;
  // rounding carry propagates into the exponent, possibly up to inf
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return h;
}

float half_bits_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  const std::uint32_t mant = h & 0x3FFu;
  std::uint32_t f;
  if (exp == 0) {
    if (mant == 0) {
      f = sign;
    } else {
      std::uint32_t m = mant;
      int e = -1;
      while (!(m & 0x400u)) {
        m <<= 1;
        ++e;
      }
      f = sign | (static_cast<std::uint32_t>(112 - e) << 23) | ((m & 0x3FFu) << 13);
    }
  } else if (exp == 31) {
    f = sign | 0x7F800000u | (mant << 13);
  } else {
    f = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(f);
}

Tensor to_half_precision(const Tensor& x) {
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (!std::isfinite(x[i]))
      fail("to_half_precision: non-finite input at index " + std::to_string(i));
    const float h = half_bits_to_float(float_to_half_bits(x[i]));
    if (std::isinf(h))
      fail("to_half_precision: overflow beyond binary16 range at index " + std::to_string(i));
    out[i] = h;
  }
  return out;
}

}  // namespace dqkd
