#include "deepir/backbone.hpp"

#include <cmath>
#include <random>

namespace deepir {

std::size_t BackboneParams::total_stride() const {
  std::size_t s = 1;
  for (const auto& l : layers) s *= l.stride;
  return s;
}

std::size_t BackboneParams::out_channels() const {
  return layers.empty() ? 3 : layers.back().weight.dim(0);
}

BackboneParams BackboneParams::zeros_like() const {
  BackboneParams z;
  for (const auto& l : layers) {
    z.layers.push_back({Tensor::zeros_like(l.weight), Tensor::zeros_like(l.bias), l.stride, l.pad});
  }
  return z;
}

BackboneParams init_backbone(std::uint64_t seed, const BackboneConfig& config) {
  if (config.depth == 0 || config.channels == 0 || config.kernel == 0 || config.stride == 0) {
    throw std::invalid_argument("backbone config values must be positive");
  }
  std::mt19937_64 rng(seed);
  BackboneParams p;
  std::size_t c_in = Image::channels();
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::size_t fan_in = c_in * config.kernel * config.kernel;
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    ConvLayer layer;
    layer.weight = Tensor({config.channels, c_in, config.kernel, config.kernel});
    for (double& w : layer.weight.values()) w = normal(rng);
    layer.bias = Tensor({config.channels});
    layer.stride = config.stride;
    layer.pad = config.kernel / 2;
    p.layers.push_back(std::move(layer));
    c_in = config.channels;
  }
  return p;
}

BackboneTrace backbone_forward(const BackboneParams& params, const Image& image) {
  const std::size_t floor = params.total_stride();
  if (image.height() < floor || image.width() < floor) {
    throw DimensionError("image " + std::to_string(image.height()) + "x" +
                         std::to_string(image.width()) + " is smaller than the backbone stride " +
                         std::to_string(floor));
  }
  BackboneTrace trace;
  Tensor x = image.tensor();
  for (const auto& layer : params.layers) {
    Tensor pre = detail::conv2d_forward(x, layer.weight, layer.bias, layer.stride, layer.pad);
    trace.layer_inputs.push_back(std::move(x));
    x = pre;
    for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
    trace.pre_activations.push_back(std::move(pre));
  }
  trace.features = std::move(x);
  return trace;
}

void backbone_backward(const BackboneParams& params, const BackboneTrace& trace,
                       const Tensor& grad_features, BackboneParams& grads, Tensor* grad_image) {
  require_same_shape(trace.features, grad_features, "backbone backward");
  Tensor g = grad_features;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    const auto& pre = trace.pre_activations[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!(pre[k] > 0.0)) g[k] = 0.0;
    }
    const auto& layer = params.layers[i];
    const bool need_input = i > 0 || grad_image != nullptr;
    Tensor gin;
    if (need_input) gin = Tensor::zeros_like(trace.layer_inputs[i]);
    detail::conv2d_backward(trace.layer_inputs[i], layer.weight, layer.stride, layer.pad, g,
                            need_input ? &gin : nullptr, grads.layers[i].weight,
                            grads.layers[i].bias);
    if (i == 0 && grad_image) *grad_image = std::move(gin);
    g = std::move(gin);
  }
}

DualResult extract_features(const Image& image, const BackboneParams& params) {
  BackboneTrace trace = backbone_forward(params, image);
  Tensor out = trace.features;
  return {std::move(out), [params, trace = std::move(trace)](const Tensor& upstream) {
            BackboneParams grads = params.zeros_like();
            Tensor gimg;
            backbone_backward(params, trace, upstream, grads, &gimg);
            std::vector<Tensor> res;
            res.push_back(std::move(gimg));
            for (auto& l : grads.layers) {
              res.push_back(std::move(l.weight));
              res.push_back(std::move(l.bias));
            }
            return res;
          }};
}

}  // namespace deepir
