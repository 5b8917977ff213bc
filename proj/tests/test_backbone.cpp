#include <random>

#include "deepir/backbone.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deepir;

namespace {

Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  return Image(testing::random_tensor({3, h, w}, rng, 0.0, 1.0));
}

}  // namespace

TEST_CASE("feature map shape follows the stride law") {
  const auto params = init_backbone(0, {.depth = 3, .channels = 32});
  CHECK(params.total_stride() == 8);
  std::mt19937_64 rng(1);
  CHECK(backbone_forward(params, random_image(64, 64, rng)).features.shape() == Shape{32, 8, 8});
  CHECK(backbone_forward(params, random_image(80, 64, rng)).features.shape() == Shape{32, 10, 8});
}

TEST_CASE("doubling the width roughly doubles the feature width") {
  const auto params = init_backbone(3);
  std::mt19937_64 rng(2);
  for (std::size_t w : {40u, 57u, 64u}) {
    const auto narrow = backbone_forward(params, random_image(48, w, rng)).features;
    const auto wide = backbone_forward(params, random_image(48, 2 * w, rng)).features;
    CHECK(narrow.dim(0) == wide.dim(0));
    CHECK(wide.dim(2) >= 2 * narrow.dim(2) - 1);
    CHECK(wide.dim(2) <= 2 * narrow.dim(2));
  }
}

TEST_CASE("images smaller than the total stride are rejected") {
  const auto params = init_backbone(0);
  CHECK_THROWS_AS(backbone_forward(params, Image(7, 64)), DimensionError);
  CHECK_NOTHROW(backbone_forward(params, Image(8, 8)));
}

TEST_CASE("extraction is deterministic") {
  const auto params = init_backbone(0);
  const Image img(64, 48, 0.5);
  CHECK(backbone_forward(params, img).features == backbone_forward(params, img).features);
}

TEST_CASE("init is seeded and fan-in scaled") {
  const auto a = init_backbone(0);
  const auto b = init_backbone(0);
  const auto c = init_backbone(1);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].weight == b.layers[i].weight);
    CHECK(a.layers[i].bias == Tensor::zeros_like(a.layers[i].bias));
  }
  CHECK_FALSE(a.layers[0].weight == c.layers[0].weight);

  for (const auto& layer : a.layers) {
    const auto& w = layer.weight;
    const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    double mean = 0.0;
    for (double v : w.values()) mean += v;
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (double v : w.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.size());
    CHECK(std::abs(var / (2.0 / fan_in) - 1.0) < 0.2);
  }
}

TEST_CASE("backbone gradients match finite differences") {
  auto params = init_backbone(5, {.depth = 2, .channels = 4});
  std::mt19937_64 rng(6);
  Image img = random_image(13, 11, rng);
  const auto trace = backbone_forward(params, img);
  const Tensor up = testing::random_tensor(trace.features.shape(), rng);
  auto grads = params.zeros_like();
  Tensor gimg;
  backbone_backward(params, trace, up, grads, &gimg);

  auto loss = [&] { return testing::weighted_sum(backbone_forward(params, img).features, up); };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    CHECK(testing::max_rel_error(grads.layers[i].weight,
                                 testing::numeric_gradient(loss, params.layers[i].weight)) < 1e-5);
    CHECK(testing::max_rel_error(grads.layers[i].bias,
                                 testing::numeric_gradient(loss, params.layers[i].bias)) < 1e-5);
  }
  CHECK(testing::max_rel_error(gimg, testing::numeric_gradient(loss, img.tensor())) < 1e-5);

  // The DualResult wrapper returns the same gradients.
  const auto dual = extract_features(img, params);
  const auto g = dual.backward(up);
  REQUIRE(g.size() == 1 + 2 * params.layers.size());
  CHECK(g[0] == gimg);
  CHECK(g[1] == grads.layers[0].weight);
}
