#include <doctest.h>

#include "dqkd/model.hpp"

#include <cstring>
#include <random>

using namespace dqkd;

namespace {

ModelDef three_layer() {
  ModelDef m;
  m.in_channels = 1;
  m.layers = {
      LayerDef::make_conv(3, 1, 1, 1, 4), LayerDef::make_relu(),
      LayerDef::make_conv(3, 2, 1, 4, 8), LayerDef::make_relu(),
      LayerDef::make_conv(3, 1, 1, 8, 8), LayerDef::make_relu(),
  };
  m.tap_points = {1, 3, 5};
  return m;
}

Tensor random_input(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  Tensor t({1, 8, 8});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("validate_model catches bad chains and taps") {
  ModelDef m = three_layer();
  CHECK_NOTHROW(validate_model(m));
  m.layers[2].conv.in_ch = 3;
  CHECK_THROWS_WITH_AS(validate_model(m), doctest::Contains("layer 2"), TensorError);
  m = three_layer();
  m.tap_points = {3, 1};
  CHECK_THROWS_AS(validate_model(m), TensorError);
  m.tap_points = {99};
  CHECK_THROWS_AS(validate_model(m), TensorError);
}

TEST_CASE("forward with zero conv weights yields max(0, bias) constants") {
  ModelDef m = three_layer();
  Params p = init_params<float>(m, 5);
  for (auto& w : p.weights) w.array().setZero();
  p.biases[0].array().setConstant(0.5f);
  p.biases[1].array().setConstant(-1.0f);
  p.biases[2].array().setConstant(0.25f);
  auto pyr = forward(m, p, random_input(1));
  REQUIRE(pyr.size() == 3);
  for (std::int64_t i = 0; i < pyr[0].numel(); ++i) CHECK(pyr[0][i] == doctest::Approx(0.5f));
  for (std::int64_t i = 0; i < pyr[1].numel(); ++i) CHECK(pyr[1][i] == 0.0f);
  // third conv consumes the zero map, so only its bias shows through
  for (std::int64_t i = 0; i < pyr[2].numel(); ++i) CHECK(pyr[2][i] == doctest::Approx(0.25f));
}

TEST_CASE("single-tap model equals conv2d output") {
  ModelDef m;
  m.in_channels = 1;
  m.layers = {LayerDef::make_conv(3, 1, 0, 1, 2)};
  m.tap_points = {0};
  Params p = init_params<float>(m, 9);
  Tensor in = random_input(2);
  auto pyr = forward(m, p, in);
  Tensor direct = conv2d(in, p.weights[0], &p.biases[0], 1, 0);
  REQUIRE(pyr.size() == 1);
  REQUIRE(pyr[0].shape() == direct.shape());
  for (std::int64_t i = 0; i < direct.numel(); ++i) CHECK(pyr[0][i] == direct[i]);
}

TEST_CASE("forward is bit-deterministic across runs") {
  ModelDef m = three_layer();
  Params p = init_params<float>(m, 21);
  Tensor in = random_input(3);
  auto a = forward(m, p, in);
  auto b = forward(m, p, in);
  REQUIRE(a.size() == b.size());
  for (std::size_t l = 0; l < a.size(); ++l) {
    REQUIRE(a[l].numel() == b[l].numel());
    CHECK(std::memcmp(a[l].data(), b[l].data(),
                      static_cast<std::size_t>(a[l].numel()) * sizeof(float)) == 0);
  }
}

TEST_CASE("forward names the offending layer") {
  ModelDef m;
  m.in_channels = 1;
  m.layers = {LayerDef::make_conv(3, 1, 1, 1, 4), LayerDef::make_relu(),
              LayerDef::make_conv(3, 1, 0, 4, 4)};  // pad 0: shrinks below zero on tiny inputs
  m.tap_points = {2};
  Params p = init_params<float>(m, 5);
  Tensor bad({1, 2, 2});
  CHECK_THROWS_WITH_AS(forward(m, p, bad), doctest::Contains("layer 2"), TensorError);
  Tensor wrong_ch({2, 8, 8});
  CHECK_THROWS_WITH_AS(forward(m, p, wrong_ch), doctest::Contains("channels"), TensorError);
}

TEST_CASE("default taps are the last three conv layers") {
  ModelDef m = three_layer();
  m.tap_points.clear();
  CHECK(m.effective_taps() == std::vector<int>{0, 2, 4});
}
