#pragma once

#include "dqkd/model.hpp"
#include "dqkd/quantsim.hpp"

#include <optional>
#include <span>

namespace dqkd {

enum class LossKind { stfpm, rd_cosine, us_regression };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::stfpm: return "stfpm";
    case LossKind::rd_cosine: return "rd_cosine";
    case LossKind::us_regression: return "us_regression";
  }
  return "?";
}

// Fake-quantization insertion points. after_layer[i] requantizes the output
// of layer i (for a conv followed by relu the site sits on the relu, mirroring
// fused conv+relu integer inference). weight[k] applies to conv ordinal k.
struct QatSites {
  std::optional<QuantParams> input;
  std::vector<std::optional<QuantParams>> weight;
  std::vector<std::optional<QuantParams>> after_layer;

  bool empty() const {
    if (input) return false;
    for (const auto& w : weight)
      if (w) return false;
    for (const auto& a : after_layer)
      if (a) return false;
    return true;
  }
};

template <typename S>
struct TrainExample {
  TensorT<S> input;
  FeaturePyramidT<S> target;  // aligned with the student model's taps
};

namespace detail {

constexpr double kNormEps = 1e-12;

template <typename S>
struct ForwardCache {
  TensorT<S> input_raw;
  TensorT<S> input_used;
  std::vector<TensorT<S>> raw;     // layer outputs before after-layer fake-quant
  std::vector<TensorT<S>> out;     // layer outputs after fake-quant
  std::vector<TensorT<S>> w_used;  // per conv ordinal, weights as consumed
};

template <typename S>
ForwardCache<S> forward_cached(const ModelDef& model, const ParamsT<S>& params,
                               const TensorT<S>& input, const QatSites* qat) {
  ForwardCache<S> cache;
  cache.input_raw = input;
  cache.input_used = (qat && qat->input) ? fake_quantize(input, *qat->input) : input;
  const TensorT<S>* cur = &cache.input_used;
  int conv_idx = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const TensorT<S>* w = nullptr;
    const TensorT<S>* b = nullptr;
    if (layer.kind == LayerDef::Kind::conv) {
      const auto k = static_cast<std::size_t>(conv_idx);
      if (qat && k < qat->weight.size() && qat->weight[k])
        cache.w_used.push_back(fake_quantize(params.weights[k], *qat->weight[k]));
      else
        cache.w_used.push_back(params.weights[k]);
      w = &cache.w_used.back();
      b = &params.biases[k];
      ++conv_idx;
    }
    cache.raw.push_back(apply_layer(layer, *cur, w, b));
    if (qat && i < qat->after_layer.size() && qat->after_layer[i])
      cache.out.push_back(fake_quantize(cache.raw.back(), *qat->after_layer[i]));
    else
      cache.out.push_back(cache.raw.back());
    cur = &cache.out.back();
  }
  return cache;
}

template <typename S>
void conv2d_backward(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& gout, int stride,
                     int pad, TensorT<S>& gx, TensorT<S>& gw, TensorT<S>* gb) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = gout.dim(1), OW = gout.dim(2);
  for (int o = 0; o < O; ++o)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const S g = gout(o, oh, ow);
        if (gb) (*gb)[o] += g;
        const int ih0 = oh * stride - pad;
        const int iw0 = ow * stride - pad;
        for (int c = 0; c < C; ++c)
          for (int kh = 0; kh < KH; ++kh) {
            const int ih = ih0 + kh;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < KW; ++kw) {
              const int iw = iw0 + kw;
              if (iw < 0 || iw >= W) continue;
              gw(o, c, kh, kw) += g * x(c, ih, iw);
              gx(c, ih, iw) += g * w(o, c, kh, kw);
            }
          }
      }
}

template <typename S>
TensorT<S> maxpool2d_backward(const TensorT<S>& x, const TensorT<S>& gout, int kernel,
                              int stride) {
  TensorT<S> gx(x.shape());
  const int C = x.dim(0);
  const int OH = gout.dim(1), OW = gout.dim(2);
  for (int c = 0; c < C; ++c)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        int bh = oh * stride, bw = ow * stride;
        S m = x(c, bh, bw);
        for (int kh = 0; kh < kernel; ++kh)
          for (int kw = 0; kw < kernel; ++kw) {
            const S v = x(c, oh * stride + kh, ow * stride + kw);
            if (v > m) {
              m = v;
              bh = oh * stride + kh;
              bw = ow * stride + kw;
            }
          }
        gx(c, bh, bw) += gout(c, oh, ow);
      }
  return gx;
}

template <typename S>
TensorT<S> bilinear_upsample_backward(const TensorT<S>& x, const TensorT<S>& gout) {
  TensorT<S> gx(x.shape());
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int OH = gout.dim(1), OW = gout.dim(2);
  const double sh = static_cast<double>(H) / OH;
  const double sw = static_cast<double>(W) / OW;
  for (int c = 0; c < C; ++c)
    for (int oh = 0; oh < OH; ++oh) {
      double fy = (oh + 0.5) * sh - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, H - 1);
      const S wy = static_cast<S>(fy - y0);
      for (int ow = 0; ow < OW; ++ow) {
        double fx = (ow + 0.5) * sw - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, W - 1);
        const S wx = static_cast<S>(fx - x0);
        const S g = gout(c, oh, ow);
        gx(c, y0, x0) += g * (S(1) - wy) * (S(1) - wx);
        gx(c, y0, x1) += g * (S(1) - wy) * wx;
        gx(c, y1, x0) += g * wy * (S(1) - wx);
        gx(c, y1, x1) += g * wy * wx;
      }
    }
  return gx;
}

template <typename S>
void ste_mask_inplace(TensorT<S>& grad, const TensorT<S>& pre, const QuantParams& qp) {
  for (std::int64_t i = 0; i < grad.numel(); ++i) {
    const double v = static_cast<double>(pre[i]);
    if (v < qp.fmin || v > qp.fmax) grad[i] = S(0);
  }
}

template <typename S>
ParamsT<S> zero_like(const ParamsT<S>& params) {
  ParamsT<S> g;
  for (const auto& w : params.weights) g.weights.emplace_back(w.shape());
  for (const auto& b : params.biases)
    g.biases.push_back(b.empty() ? TensorT<S>() : TensorT<S>(b.shape()));
  return g;
}

// Reverse pass. tap_grads (aligned with effective taps) are injected at their
// layers; final_grad, when given, seeds the last layer's output.
template <typename S>
void backward(const ModelDef& model, const ParamsT<S>& params, const ForwardCache<S>& cache,
              const std::vector<TensorT<S>>& tap_grads, const TensorT<S>* final_grad,
              const QatSites* qat, ParamsT<S>& grads) {
  const auto taps = model.effective_taps();
  const int L = static_cast<int>(model.layers.size());
  TensorT<S> gcur(cache.out.back().shape());
  if (final_grad) gcur.array() += final_grad->array();

  int conv_idx = static_cast<int>(params.weights.size());
  for (int i = L - 1; i >= 0; --i) {
    for (std::size_t t = 0; t < taps.size(); ++t)
      if (taps[t] == i && !tap_grads.empty()) gcur.array() += tap_grads[t].array();

    if (qat && static_cast<std::size_t>(i) < qat->after_layer.size() && qat->after_layer[i])
      ste_mask_inplace(gcur, cache.raw[static_cast<std::size_t>(i)], *qat->after_layer[i]);

    const TensorT<S>& x =
        i == 0 ? cache.input_used : cache.out[static_cast<std::size_t>(i - 1)];
    const auto& layer = model.layers[static_cast<std::size_t>(i)];
    TensorT<S> gx;
    switch (layer.kind) {
      case LayerDef::Kind::conv: {
        --conv_idx;
        const auto k = static_cast<std::size_t>(conv_idx);
        gx = TensorT<S>(x.shape());
        TensorT<S> gw_used(params.weights[k].shape());
        TensorT<S>* gb = grads.biases[k].empty() ? nullptr : &grads.biases[k];
        conv2d_backward(x, cache.w_used[k], gcur, layer.conv.stride, layer.conv.pad, gx, gw_used,
                        gb);
        if (qat && k < qat->weight.size() && qat->weight[k])
          ste_mask_inplace(gw_used, params.weights[k], *qat->weight[k]);
        grads.weights[k].array() += gw_used.array();
        break;
      }
      case LayerDef::Kind::relu: {
        gx = TensorT<S>(x.shape());
        for (std::int64_t j = 0; j < x.numel(); ++j) gx[j] = x[j] > S(0) ? gcur[j] : S(0);
        break;
      }
      case LayerDef::Kind::maxpool:
        gx = maxpool2d_backward(x, gcur, layer.pool_kernel, layer.pool_stride);
        break;
      case LayerDef::Kind::upsample:
        gx = bilinear_upsample_backward(x, gcur);
        break;
    }
    gcur = std::move(gx);
  }
}

template <typename S>
struct LossResult {
  double loss = 0.0;
  std::vector<TensorT<S>> dtaps;
};

// Loss heads over aligned pyramids; gradients are w.r.t. the student maps.
template <typename S>
LossResult<S> loss_head(LossKind kind, const FeaturePyramidT<S>& target,
                        const FeaturePyramidT<S>& student) {
  if (target.size() != student.size())
    fail("loss: pyramid depth mismatch (" + std::to_string(target.size()) + " vs " +
         std::to_string(student.size()) + ")");
  LossResult<S> res;
  for (std::size_t l = 0; l < target.size(); ++l) {
    const auto& T = target[l];
    const auto& Sm = student[l];
    if (!T.same_shape(Sm))
      fail("loss: layer " + std::to_string(l) + " shape mismatch " + T.shape_str() + " vs " +
           Sm.shape_str());
    const int C = T.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(T.dim(1)) * T.dim(2);
    TensorT<S> d(Sm.shape());
    const double inv_p = 1.0 / static_cast<double>(plane);
    double layer_loss = 0.0;

    for (std::int64_t p = 0; p < plane; ++p) {
      const S* tv = T.data() + p;
      const S* sv = Sm.data() + p;
      S* dv = d.data() + p;
      switch (kind) {
        case LossKind::us_regression: {
          for (int c = 0; c < C; ++c) {
            const double diff =
                static_cast<double>(sv[c * plane]) - static_cast<double>(tv[c * plane]);
            layer_loss += diff * diff * inv_p;
            dv[c * plane] = static_cast<S>(2.0 * diff * inv_p);
          }
          break;
        }
        case LossKind::stfpm: {
          double tn = 0.0, sn = 0.0;
          for (int c = 0; c < C; ++c) {
            tn += static_cast<double>(tv[c * plane]) * tv[c * plane];
            sn += static_cast<double>(sv[c * plane]) * sv[c * plane];
          }
          const double rt = std::max(std::sqrt(tn), kNormEps);
          const double rs = std::max(std::sqrt(sn), kNormEps);
          double dot_gn_ns = 0.0;
          double half_sq = 0.0;
          for (int c = 0; c < C; ++c) {
            const double nt = tv[c * plane] / rt;
            const double ns = sv[c * plane] / rs;
            const double diff = ns - nt;
            half_sq += 0.5 * diff * diff;
            dot_gn_ns += diff * ns;
          }
          layer_loss += half_sq * inv_p;
          const bool on_sphere = std::sqrt(sn) > kNormEps;
          for (int c = 0; c < C; ++c) {
            const double nt = tv[c * plane] / rt;
            const double ns = sv[c * plane] / rs;
            const double gn = (ns - nt) * inv_p;
            const double g = on_sphere ? (gn - ns * dot_gn_ns * inv_p) / rs : gn / rs;
            dv[c * plane] = static_cast<S>(g);
          }
          break;
        }
        case LossKind::rd_cosine: {
          double tn = 0.0, sn = 0.0, dot = 0.0;
          for (int c = 0; c < C; ++c) {
            const double t = tv[c * plane];
            const double s = sv[c * plane];
            tn += t * t;
            sn += s * s;
            dot += t * s;
          }
          const double a = std::max(std::sqrt(tn), kNormEps);
          const double b = std::max(std::sqrt(sn), kNormEps);
          layer_loss += (1.0 - dot / (a * b)) * inv_p;
          const bool live = std::sqrt(sn) > kNormEps;
          for (int c = 0; c < C; ++c) {
            const double t = tv[c * plane];
            const double s = sv[c * plane];
            double g = -t / (a * b);
            if (live) g += dot * s / (a * b * b * b);
            dv[c * plane] = static_cast<S>(g * inv_p);
          }
          break;
        }
      }
    }
    res.loss += layer_loss;
    res.dtaps.push_back(std::move(d));
  }
  return res;
}

}  // namespace detail

// Mean batch loss and exact reverse-mode gradients w.r.t. all trainable
// parameters. qat, when given, inserts fake-quantization with the
// straight-through rule.
template <typename S>
std::pair<double, ParamsT<S>> loss_gradients_ptrs(const ModelDef& model, const ParamsT<S>& params,
                                                  LossKind loss_spec,
                                                  std::span<const TrainExample<S>* const> batch,
                                                  const QatSites* qat = nullptr) {
  if (batch.empty()) fail("loss_gradients: empty batch");
  ParamsT<S> grads = detail::zero_like(params);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    auto cache = detail::forward_cached(model, params, batch[bi]->input, qat);
    FeaturePyramidT<S> taps;
    for (int t : model.effective_taps()) taps.push_back(cache.out[static_cast<std::size_t>(t)]);
    auto lr = detail::loss_head(loss_spec, batch[bi]->target, taps);
    if (!std::isfinite(lr.loss))
      fail("loss_gradients: non-finite loss at batch index " + std::to_string(bi));
    total += lr.loss * inv_b;
    for (auto& d : lr.dtaps) d.array() *= static_cast<S>(inv_b);
    detail::backward(model, params, cache, lr.dtaps, static_cast<const TensorT<S>*>(nullptr),
                     qat, grads);
  }
  return {total, std::move(grads)};
}

template <typename S>
std::pair<double, ParamsT<S>> loss_gradients(const ModelDef& model, const ParamsT<S>& params,
                                             LossKind loss_spec,
                                             std::span<const TrainExample<S>> batch,
                                             const QatSites* qat = nullptr) {
  std::vector<const TrainExample<S>*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return loss_gradients_ptrs<S>(model, params, loss_spec, ptrs, qat);
}

// Scalar loss value only (same reduction as loss_gradients).
template <typename S>
double loss_value(const ModelDef& model, const ParamsT<S>& params, LossKind loss_spec,
                  std::span<const TrainExample<S>> batch, const QatSites* qat = nullptr) {
  if (batch.empty()) fail("loss_value: empty batch");
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    auto cache = detail::forward_cached(model, params, ex.input, qat);
    FeaturePyramidT<S> taps;
    for (int t : model.effective_taps()) taps.push_back(cache.out[static_cast<std::size_t>(t)]);
    total += detail::loss_head(loss_spec, ex.target, taps).loss * inv_b;
  }
  return total;
}

}  // namespace dqkd
