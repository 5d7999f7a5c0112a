#pragma once

#include "dqkd/conv.hpp"
#include "dqkd/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace dqkd {

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int in_ch = 1;
  int out_ch = 1;
  bool has_bias = true;
};

struct LayerDef {
  enum class Kind { conv, relu, maxpool, upsample };
  Kind kind = Kind::conv;
  ConvSpec conv;        // kind == conv
  int pool_kernel = 2;  // kind == maxpool
  int pool_stride = 2;
  int up_factor = 2;  // kind == upsample

  static LayerDef make_conv(int kernel, int stride, int pad, int in_ch, int out_ch,
                            bool has_bias = true) {
    LayerDef l;
    l.kind = Kind::conv;
    l.conv = {kernel, stride, pad, in_ch, out_ch, has_bias};
    return l;
  }
  static LayerDef make_relu() {
    LayerDef l;
    l.kind = Kind::relu;
    return l;
  }
  static LayerDef make_maxpool(int kernel, int stride) {
    LayerDef l;
    l.kind = Kind::maxpool;
    l.pool_kernel = kernel;
    l.pool_stride = stride;
    return l;
  }
  static LayerDef make_upsample(int factor) {
    LayerDef l;
    l.kind = Kind::upsample;
    l.up_factor = factor;
    return l;
  }
};

// Linear chain of layers; tap_points index the layers whose outputs form the
// feature pyramid. When tap_points is empty the last three conv layers are
// tapped.
struct ModelDef {
  std::vector<LayerDef> layers;
  std::vector<int> tap_points;
  int in_channels = 1;

  std::vector<int> effective_taps() const {
    if (!tap_points.empty()) return tap_points;
    std::vector<int> convs;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
      if (layers[i].kind == LayerDef::Kind::conv) convs.push_back(i);
    const int n = static_cast<int>(convs.size());
    std::vector<int> taps(convs.begin() + std::max(0, n - 3), convs.end());
    return taps;
  }

  std::vector<int> conv_layer_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
      if (layers[i].kind == LayerDef::Kind::conv) out.push_back(i);
    return out;
  }
};

// Channel-count compatibility along the chain plus tap validity.
void validate_model(const ModelDef& model);

// One weight/bias pair per conv layer, in conv order. Bias tensors are empty
// when has_bias is false.
template <typename S>
struct ParamsT {
  std::vector<TensorT<S>> weights;
  std::vector<TensorT<S>> biases;

  std::vector<TensorT<S>*> flat() {
    std::vector<TensorT<S>*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(&weights[i]);
      if (!biases[i].empty()) out.push_back(&biases[i]);
    }
    return out;
  }
  std::vector<const TensorT<S>*> flat() const {
    std::vector<const TensorT<S>*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(&weights[i]);
      if (!biases[i].empty()) out.push_back(&biases[i]);
    }
    return out;
  }

  template <typename T>
  ParamsT<T> cast() const {
    ParamsT<T> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<T>());
    for (const auto& b : biases)
      out.biases.push_back(b.empty() ? TensorT<T>() : b.template cast<T>());
    return out;
  }
};
using Params = ParamsT<float>;
using Gradients = Params;

// He-style init, deterministic in seed.
template <typename S>
ParamsT<S> init_params(const ModelDef& model, std::uint64_t seed) {
  ParamsT<S> p;
  std::mt19937_64 rng(seed);
  for (const auto& layer : model.layers) {
    if (layer.kind != LayerDef::Kind::conv) continue;
    const auto& c = layer.conv;
    const double fan_in = static_cast<double>(c.in_ch) * c.kernel * c.kernel;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    TensorT<S> w({c.out_ch, c.in_ch, c.kernel, c.kernel});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(dist(rng));
    p.weights.push_back(std::move(w));
    p.biases.push_back(c.has_bias ? TensorT<S>({c.out_ch}) : TensorT<S>());
  }
  return p;
}

template <typename S>
TensorT<S> apply_layer(const LayerDef& layer, const TensorT<S>& x, const TensorT<S>* w,
                       const TensorT<S>* b) {
  switch (layer.kind) {
    case LayerDef::Kind::conv:
      return conv2d(x, *w, (b && !b->empty()) ? b : nullptr, layer.conv.stride, layer.conv.pad);
    case LayerDef::Kind::relu:
      return relu(x);
    case LayerDef::Kind::maxpool:
      return maxpool2d(x, layer.pool_kernel, layer.pool_stride);
    case LayerDef::Kind::upsample:
      return bilinear_upsample(x, x.dim(1) * layer.up_factor, x.dim(2) * layer.up_factor);
  }
  fail("apply_layer: unknown layer kind");
}

// Outputs of every layer, front to back.
template <typename S>
std::vector<TensorT<S>> forward_all(const ModelDef& model, const ParamsT<S>& params,
                                    const TensorT<S>& input) {
  if (input.rank() != 3) fail("forward: input must be CxHxW");
  if (input.dim(0) != model.in_channels)
    fail("forward: input has " + std::to_string(input.dim(0)) + " channels, model expects " +
         std::to_string(model.in_channels));
  std::vector<TensorT<S>> outs;
  outs.reserve(model.layers.size());
  const TensorT<S>* cur = &input;
  int conv_idx = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const TensorT<S>* w = nullptr;
    const TensorT<S>* b = nullptr;
    if (layer.kind == LayerDef::Kind::conv) {
      w = &params.weights.at(static_cast<std::size_t>(conv_idx));
      b = &params.biases.at(static_cast<std::size_t>(conv_idx));
      ++conv_idx;
    }
    try {
      outs.push_back(apply_layer(layer, *cur, w, b));
    } catch (const TensorError& e) {
      fail("forward: layer " + std::to_string(i) + ": " + e.what());
    }
    cur = &outs.back();
  }
  return outs;
}

// Feature pyramid at the model's tap points.
template <typename S>
FeaturePyramidT<S> forward(const ModelDef& model, const ParamsT<S>& params,
                           const TensorT<S>& input) {
  auto outs = forward_all(model, params, input);
  FeaturePyramidT<S> pyr;
  for (int t : model.effective_taps()) {
    if (t < 0 || t >= static_cast<int>(outs.size())) fail("forward: tap point out of range");
    pyr.push_back(outs[static_cast<std::size_t>(t)]);
  }
  if (pyr.empty()) fail("forward: model has no tap points");
  return pyr;
}

}  // namespace dqkd
