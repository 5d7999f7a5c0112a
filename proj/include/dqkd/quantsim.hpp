#pragma once

#include "dqkd/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

namespace dqkd {

enum class QuantMode { affine_unsigned, symmetric_signed };

inline const char* quant_mode_name(QuantMode m) {
  return m == QuantMode::affine_unsigned ? "affine_unsigned" : "symmetric_signed";
}

// Affine b-bit mapping x_q = round(x/s + z). fmin/fmax hold the representable
// float range s*(qmin-z) .. s*(qmax-z); dequantize(z) == 0 by construction.
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;
  std::int32_t qmin = 0;
  std::int32_t qmax = 255;
  double fmin = 0.0;
  double fmax = 255.0;
  QuantMode mode = QuantMode::affine_unsigned;
};

QuantParams compute_qparams(double alpha, double beta, int bits, QuantMode mode);

// Ties to even, matching the default FP environment.
inline double round_half_even(double v) { return std::nearbyint(v); }

inline std::int32_t quantize_value(double x, const QuantParams& qp) {
  const double v = round_half_even(x / qp.scale + qp.zero_point);
  if (v <= qp.qmin) return qp.qmin;
  if (v >= qp.qmax) return qp.qmax;
  return static_cast<std::int32_t>(v);
}

inline double dequantize_value(std::int32_t q, const QuantParams& qp) {
  return qp.scale * (q - qp.zero_point);
}

template <typename S>
S fake_quantize_value(S x, const QuantParams& qp) {
  return static_cast<S>(dequantize_value(quantize_value(static_cast<double>(x), qp), qp));
}

struct IntTensor {
  TensorT<std::int32_t> q;
  QuantParams qp;

  const std::vector<int>& shape() const { return q.shape(); }
  std::int64_t numel() const { return q.numel(); }
};

template <typename S>
IntTensor quantize(const TensorT<S>& x, const QuantParams& qp) {
  IntTensor out{TensorT<std::int32_t>(x.shape()), qp};
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.q[i] = quantize_value(static_cast<double>(x[i]), qp);
  return out;
}

inline Tensor dequantize(const IntTensor& t) {
  Tensor out(t.q.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out[i] = static_cast<float>(dequantize_value(t.q[i], t.qp));
  return out;
}

template <typename S>
TensorT<S> dequantize_as(const IntTensor& t) {
  TensorT<S> out(t.q.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out[i] = static_cast<S>(dequantize_value(t.q[i], t.qp));
  return out;
}

// Quantize-dequantize in the float graph. The straight-through gradient rule
// (pass inside [fmin, fmax], zero outside) lives in the autograd tape.
template <typename S>
TensorT<S> fake_quantize(const TensorT<S>& x, const QuantParams& qp) {
  TensorT<S> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = fake_quantize_value(x[i], qp);
  return out;
}

// Integer convolution with 32-bit accumulator and double-precision
// requantization: q_out = clamp(round(acc * s_x*s_w/s_out + z_out)).
// bias_q must be pre-quantized at scale s_x*s_w with zero-point 0.
IntTensor quantized_conv2d(const IntTensor& x_q, const IntTensor& w_q,
                           const std::vector<std::int32_t>& bias_q, const QuantParams& qp_out,
                           int stride, int pad);

// --- binary16 simulation ---

std::uint16_t float_to_half_bits(float f);
float half_bits_to_float(std::uint16_t h);

// Each element rounded to the nearest binary16 value and widened back.
// Values beyond the binary16 range raise an error naming the index.
Tensor to_half_precision(const Tensor& x);

}  // namespace dqkd
