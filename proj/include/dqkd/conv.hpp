#pragma once

#include "dqkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

namespace dqkd {

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Direct convolution over CHW input with OCKK weights. Accumulation order is
// fixed (in-channel, then kernel row-major) so repeated runs are bit-identical.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& weights,
                  std::type_identity_t<const TensorT<S>*> bias, int stride, int pad) {
  if (input.rank() != 3) fail("conv2d: input must be CxHxW, got " + input.shape_str());
  if (weights.rank() != 4) fail("conv2d: weights must be OxCxKxK, got " + weights.shape_str());
  if (stride < 1) fail("conv2d: stride must be >= 1");
  if (pad < 0) fail("conv2d: pad must be >= 0");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int O = weights.dim(0), KC = weights.dim(1), KH = weights.dim(2), KW = weights.dim(3);
  if (KC != C)
    fail("conv2d: weight in-channels " + std::to_string(KC) + " != input channels " +
         std::to_string(C));
  if (bias && (bias->rank() != 1 || bias->dim(0) != O))
    fail("conv2d: bias must have shape (" + std::to_string(O) + ")");
  const int OH = conv_out_dim(H, KH, stride, pad);
  const int OW = conv_out_dim(W, KW, stride, pad);
  if (OH <= 0 || OW <= 0)
    fail("conv2d: zero-sized output for input " + input.shape_str() + " kernel " +
         weights.shape_str());

  TensorT<S> out({O, OH, OW});
  for (int o = 0; o < O; ++o) {
    const S b = bias ? (*bias)[o] : S(0);
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        S acc = b;
        const int ih0 = oh * stride - pad;
        const int iw0 = ow * stride - pad;
        for (int c = 0; c < C; ++c) {
          for (int kh = 0; kh < KH; ++kh) {
            const int ih = ih0 + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < KW; ++kw) {
              const int iw = iw0 + kw;
              if (iw < 0 || iw >= W) continue;
              acc += input(c, ih, iw) * weights(o, c, kh, kw);
            }
          }
        }
        out(o, oh, ow) = acc;
      }
    }
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  TensorT<S> out(x.shape());
  out.array() = x.array().max(S(0));
  return out;
}

template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& input, int kernel, int stride) {
  if (input.rank() != 3) fail("maxpool2d: input must be CxHxW");
  if (kernel < 1 || stride < 1) fail("maxpool2d: kernel and stride must be >= 1");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int OH = (H - kernel) / stride + 1;
  const int OW = (W - kernel) / stride + 1;
  if (OH <= 0 || OW <= 0) fail("maxpool2d: zero-sized output");
  TensorT<S> out({C, OH, OW});
  for (int c = 0; c < C; ++c)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        S m = input(c, oh * stride, ow * stride);
        for (int kh = 0; kh < kernel; ++kh)
          for (int kw = 0; kw < kernel; ++kw)
            m = std::max(m, input(c, oh * stride + kh, ow * stride + kw));
        out(c, oh, ow) = m;
      }
  return out;
}

// Half-pixel-center bilinear interpolation; constant maps stay constant.
// Accepts HxW or CxHxW.
template <typename S>
TensorT<S> bilinear_upsample(const TensorT<S>& map, int out_h, int out_w) {
  if (map.rank() != 2 && map.rank() != 3) fail("bilinear_upsample: input must be HxW or CxHxW");
  if (out_h < 1 || out_w < 1) fail("bilinear_upsample: target dims must be positive");
  const int C = map.rank() == 3 ? map.dim(0) : 1;
  const int H = map.dim(map.rank() - 2), W = map.dim(map.rank() - 1);
  if (out_h < H || out_w < W) fail("bilinear_upsample: target smaller than source");

  std::vector<int> out_shape = map.rank() == 3 ? std::vector<int>{C, out_h, out_w}
                                               : std::vector<int>{out_h, out_w};
  TensorT<S> out(std::move(out_shape));
  const double sh = static_cast<double>(H) / out_h;
  const double sw = static_cast<double>(W) / out_w;
  const S* src = map.data();
  S* dst = out.data();
  for (int c = 0; c < C; ++c) {
    const S* plane = src + static_cast<std::int64_t>(c) * H * W;
    for (int oh = 0; oh < out_h; ++oh) {
      double fy = (oh + 0.5) * sh - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, H - 1);
      const S wy = static_cast<S>(fy - y0);
      for (int ow = 0; ow < out_w; ++ow) {
        double fx = (ow + 0.5) * sw - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, W - 1);
        const S wx = static_cast<S>(fx - x0);
        const S top = plane[y0 * W + x0] * (S(1) - wx) + plane[y0 * W + x1] * wx;
        const S bot = plane[y1 * W + x0] * (S(1) - wx) + plane[y1 * W + x1] * wx;
        dst[(static_cast<std::int64_t>(c) * out_h + oh) * out_w + ow] =
            top * (S(1) - wy) + bot * wy;
      }
    }
  }
  return out;
}

// Per-position channel vector scaled by 1/max(norm, eps).
template <typename S>
TensorT<S> l2_normalize_channels(const TensorT<S>& fmap, S eps) {
  if (fmap.rank() != 3) fail("l2_normalize_channels: input must be CxHxW");
  if (!(eps > S(0))) fail("l2_normalize_channels: eps must be positive");
  const int C = fmap.dim(0), H = fmap.dim(1), W = fmap.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  TensorT<S> out(fmap.shape());
  for (std::int64_t p = 0; p < plane; ++p) {
    S sq = S(0);
    for (int c = 0; c < C; ++c) {
      const S v = fmap.data()[c * plane + p];
      sq += v * v;
    }
    const S inv = S(1) / std::max(std::sqrt(sq), eps);
    for (int c = 0; c < C; ++c) out.data()[c * plane + p] = fmap.data()[c * plane + p] * inv;
  }
  return out;
}

}  // namespace dqkd
