#include "dqkd/model.hpp"

namespace dqkd {

void validate_model(const ModelDef& model) {
  if (model.layers.empty()) fail("model has no layers");
  int ch = model.in_channels;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    if (layer.kind == LayerDef::Kind::conv) {
      if (layer.conv.in_ch != ch)
        fail("layer " + std::to_string(i) + ": conv expects " + std::to_string(layer.conv.in_ch) +
             " input channels but chain carries " + std::to_string(ch));
      if (layer.conv.kernel < 1 || layer.conv.stride < 1 || layer.conv.pad < 0 ||
          layer.conv.out_ch < 1)
        fail("layer " + std::to_string(i) + ": invalid conv spec");
      ch = layer.conv.out_ch;
    } else if (layer.kind == LayerDef::Kind::upsample) {
      if (layer.up_factor < 1) fail("layer " + std::to_string(i) + ": invalid upsample factor");
    } else if (layer.kind == LayerDef::Kind::maxpool) {
      if (layer.pool_kernel < 1 || layer.pool_stride < 1)
        fail("layer " + std::to_string(i) + ": invalid maxpool spec");
    }
  }
  int prev = -1;
  for (int t : model.tap_points) {
    if (t <= prev) fail("tap_points must be strictly increasing");
    if (t < 0 || t >= static_cast<int>(model.layers.size()))
      fail("tap point " + std::to_string(t) + " out of range");
    prev = t;
  }
}

}  // namespace dqkd
