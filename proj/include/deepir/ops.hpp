#pragma once

// Differentiable building blocks. Each op returns its output together with a
// backward closure mapping the upstream gradient to one gradient per input,
// in argument order. Composition is explicit; there is no tape.

#include <functional>
#include <vector>

#include "deepir/tensor.hpp"

namespace deepir {

inline constexpr double kNormEps = 1e-12;

struct DualResult {
  Tensor output;
  std::function<std::vector<Tensor>(const Tensor& upstream)> backward;
};

// input C_in x H x W, weights C_out x C_in x kh x kw, bias C_out.
// backward -> {grad_input, grad_weights, grad_bias}
DualResult conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                  std::size_t stride, std::size_t pad);

// backward -> {grad_x}; the subgradient at 0 is 0.
DualResult relu(const Tensor& x);

// v / max(|v|, eps). backward -> {grad_v}
DualResult l2_normalize(const Tensor& v, double eps = kNormEps);

// projection * (v - shift). backward -> {grad_v, grad_shift, grad_projection}
DualResult shift_fc(const Tensor& v, const Tensor& shift, const Tensor& projection);

// Elementwise sum; backward hands the upstream gradient to every input.
DualResult sum_vectors(const std::vector<Tensor>& vs);

// Raw forms used by the fixed pipeline composition, which manages its own caches.
namespace detail {

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      std::size_t stride, std::size_t pad);
void conv2d_backward(const Tensor& input, const Tensor& weights, std::size_t stride,
                     std::size_t pad, const Tensor& grad_output, Tensor* grad_input,
                     Tensor& grad_weights, Tensor& grad_bias);

// Writes y = v / max(|v|, eps) and returns the denominator.
double l2_normalize_forward(std::span<const double> v, std::span<double> y, double eps);
// Gradient w.r.t. v given the forward output y and denominator.
void l2_normalize_backward(std::span<const double> y, double denom, bool clamped,
                           std::span<const double> upstream, std::span<double> grad_v);

}  // namespace detail

}  // namespace deepir
