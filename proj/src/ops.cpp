#include "deepir/ops.hpp"

#include <algorithm>
#include <cmath>

#include "deepir/kernels.hpp"

namespace deepir {

namespace {

kernels::ConvGeometry conv_geometry(const Tensor& input, const Tensor& weights,
                                    const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (input.rank() != 3) {
    throw DimensionError("conv2d: input must be C_in x H x W, got " +
                         shape_to_string(input.shape()));
  }
  if (weights.rank() != 4) {
    throw DimensionError("conv2d: weights must be C_out x C_in x kh x kw, got " +
                         shape_to_string(weights.shape()));
  }
  if (weights.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: weights axis 1 (C_in=" + std::to_string(weights.dim(1)) +
                         ") != input axis 0 (C=" + std::to_string(input.dim(0)) + ")");
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(0)) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) +
                         " != weights axis 0 (C_out=" + std::to_string(weights.dim(0)) + ")");
  }
  return kernels::make_conv_geometry(input.dim(0), input.dim(1), input.dim(2), weights.dim(0),
                                     weights.dim(2), weights.dim(3), stride, pad);
}

}  // namespace

namespace detail {

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      std::size_t stride, std::size_t pad) {
  const auto g = conv_geometry(input, weights, bias, stride, pad);
  Tensor out({g.out_channels, g.out_h, g.out_w});
  kernels::parallel::conv2d_forward(g, input.values(), weights.values(), bias.values(),
                                    out.values());
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& weights, std::size_t stride,
                     std::size_t pad, const Tensor& grad_output, Tensor* grad_input,
                     Tensor& grad_weights, Tensor& grad_bias) {
  const Tensor bias_shape({weights.dim(0)});
  const auto g = conv_geometry(input, weights, bias_shape, stride, pad);
  if (grad_output.shape() != Shape{g.out_channels, g.out_h, g.out_w}) {
    throw DimensionError("conv2d backward: upstream " + shape_to_string(grad_output.shape()) +
                         " != output shape");
  }
  // The input gradient of the first layer is never needed; a scratch buffer keeps
  // the kernel signature uniform.
  std::vector<double> scratch;
  std::span<double> gin;
  if (grad_input) {
    gin = grad_input->values();
  } else {
    scratch.assign(g.input_size(), 0.0);
    gin = scratch;
  }
  kernels::parallel::conv2d_backward(g, input.values(), weights.values(), grad_output.values(),
                                     gin, grad_weights.values(), grad_bias.values());
}

double l2_normalize_forward(std::span<const double> v, std::span<double> y, double eps) {
  const double denom = std::max(l2_norm(v), eps);
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] / denom;
  return denom;
}

void l2_normalize_backward(std::span<const double> y, double denom, bool clamped,
                           std::span<const double> upstream, std::span<double> grad_v) {
  if (clamped) {
    for (std::size_t i = 0; i < y.size(); ++i) grad_v[i] = upstream[i] / denom;
    return;
  }
  const double yg = dot(y, upstream);
  for (std::size_t i = 0; i < y.size(); ++i) grad_v[i] = (upstream[i] - y[i] * yg) / denom;
}

}  // namespace detail

DualResult conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                  std::size_t stride, std::size_t pad) {
  Tensor out = detail::conv2d_forward(input, weights, bias, stride, pad);
  return {std::move(out), [input, weights, stride, pad](const Tensor& upstream) {
            Tensor gin = Tensor::zeros_like(input);
            Tensor gw = Tensor::zeros_like(weights);
            Tensor gb({weights.dim(0)});
            detail::conv2d_backward(input, weights, stride, pad, upstream, &gin, gw, gb);
            return std::vector<Tensor>{std::move(gin), std::move(gw), std::move(gb)};
          }};
}

DualResult relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return {std::move(out), [x](const Tensor& upstream) {
            require_same_shape(x, upstream, "relu backward");
            Tensor g = upstream;
            for (std::size_t i = 0; i < g.size(); ++i) {
              if (!(x[i] > 0.0)) g[i] = 0.0;
            }
            return std::vector<Tensor>{std::move(g)};
          }};
}

DualResult l2_normalize(const Tensor& v, double eps) {
  if (v.rank() != 1) {
    throw DimensionError("l2_normalize: expected a vector, got " + shape_to_string(v.shape()));
  }
  Tensor y = Tensor::zeros_like(v);
  const double denom = detail::l2_normalize_forward(v.values(), y.values(), eps);
  const bool clamped = l2_norm(v.values()) < eps;
  return {y, [y, denom, clamped](const Tensor& upstream) {
            require_same_shape(y, upstream, "l2_normalize backward");
            Tensor g = Tensor::zeros_like(y);
            detail::l2_normalize_backward(y.values(), denom, clamped, upstream.values(),
                                          g.values());
            return std::vector<Tensor>{std::move(g)};
          }};
}

DualResult shift_fc(const Tensor& v, const Tensor& shift, const Tensor& projection) {
  if (v.rank() != 1 || shift.rank() != 1 || projection.rank() != 2) {
    throw DimensionError("shift_fc: expected vector, vector, matrix; got " +
                         shape_to_string(v.shape()) + ", " + shape_to_string(shift.shape()) +
                         ", " + shape_to_string(projection.shape()));
  }
  if (shift.dim(0) != v.dim(0) || projection.dim(1) != v.dim(0)) {
    throw DimensionError("shift_fc: d_in mismatch: v " + shape_to_string(v.shape()) +
                         ", shift " + shape_to_string(shift.shape()) + ", projection axis 1 = " +
                         std::to_string(projection.dim(1)));
  }
  const std::size_t d_in = v.dim(0);
  const std::size_t d_out = projection.dim(0);
  Tensor centered = v;
  for (std::size_t i = 0; i < d_in; ++i) centered[i] -= shift[i];
  Tensor out({d_out});
  for (std::size_t o = 0; o < d_out; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d_in; ++i) acc += projection.at(o, i) * centered[i];
    out[o] = acc;
  }
  return {std::move(out), [centered, projection, d_in, d_out](const Tensor& upstream) {
            if (upstream.shape() != Shape{d_out}) {
              throw DimensionError("shift_fc backward: upstream " +
                                   shape_to_string(upstream.shape()));
            }
            Tensor gv({d_in});
            Tensor gp({d_out, d_in});
            for (std::size_t o = 0; o < d_out; ++o) {
              const double g = upstream[o];
              for (std::size_t i = 0; i < d_in; ++i) {
                gv[i] += projection.at(o, i) * g;
                gp.at(o, i) = g * centered[i];
              }
            }
            Tensor gs = gv;
            gs *= -1.0;
            return std::vector<Tensor>{std::move(gv), std::move(gs), std::move(gp)};
          }};
}

DualResult sum_vectors(const std::vector<Tensor>& vs) {
  if (vs.empty()) throw std::invalid_argument("sum_vectors: no regions to aggregate");
  Tensor out = vs.front();
  for (std::size_t i = 1; i < vs.size(); ++i) out += vs[i];
  const std::size_t count = vs.size();
  return {std::move(out), [count](const Tensor& upstream) {
            return std::vector<Tensor>(count, upstream);
          }};
}

}  // namespace deepir
