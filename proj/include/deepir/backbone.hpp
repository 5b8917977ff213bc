#pragma once

// Small fully-convolutional feature extractor: `depth` blocks of
// [conv kxk stride s, ReLU]. Output channels are fixed by the config while the
// spatial size follows the input, so any image size yields the same channel count.

#include <cstdint>
#include <vector>

#include "deepir/image.hpp"
#include "deepir/ops.hpp"

namespace deepir {

struct BackboneConfig {
  std::size_t depth = 3;
  std::size_t channels = 32;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

struct ConvLayer {
  Tensor weight;  // C_out x C_in x k x k
  Tensor bias;    // C_out
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct BackboneParams {
  std::vector<ConvLayer> layers;

  std::size_t total_stride() const;
  std::size_t out_channels() const;
  // Zero tensors with the same layout, for gradient accumulation.
  BackboneParams zeros_like() const;
};

// He-style init: weights ~ N(0, 2 / fan_in), zero biases. Deterministic in seed.
BackboneParams init_backbone(std::uint64_t seed, const BackboneConfig& config = {});

// Activations kept for the backward pass.
struct BackboneTrace {
  std::vector<Tensor> layer_inputs;     // input of each conv
  std::vector<Tensor> pre_activations;  // conv outputs before ReLU
  Tensor features;                      // C x h x w after the last ReLU
};

// Throws DimensionError if the image is smaller than the total stride.
BackboneTrace backbone_forward(const BackboneParams& params, const Image& image);

// Accumulates parameter gradients into `grads`. When `grad_image` is non-null the
// gradient w.r.t. the input pixels is written there too.
void backbone_backward(const BackboneParams& params, const BackboneTrace& trace,
                       const Tensor& grad_features, BackboneParams& grads,
                       Tensor* grad_image = nullptr);

// Forward with backward closure; backward yields {grad_image, w_0, b_0, w_1, b_1, ...}.
DualResult extract_features(const Image& image, const BackboneParams& params);

}  // namespace deepir
