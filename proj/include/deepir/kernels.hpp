#pragma once

// Hot inner loops of the pipeline. Every kernel exists twice: a plain serial
// reference (kept for testing and benchmarking) and an OpenMP version used by
// the library. Parallel versions split work over independent outputs only, so
// results never depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>

namespace deepir::kernels {

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  std::size_t input_size() const { return in_channels * in_h * in_w; }
  std::size_t weight_size() const { return out_channels * in_channels * kernel_h * kernel_w; }
  std::size_t output_size() const { return out_channels * out_h * out_w; }
  std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
};

// Throws DimensionError when the kernel does not fit the padded input.
ConvGeometry make_conv_geometry(std::size_t in_channels, std::size_t in_h, std::size_t in_w,
                                std::size_t out_channels, std::size_t kernel_h,
                                std::size_t kernel_w, std::size_t stride, std::size_t pad);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output);

// Gradients are accumulated (+=) into grad_input, grad_weights and grad_bias.
void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weights, std::span<const double> grad_output,
                     std::span<double> grad_input, std::span<double> grad_weights,
                     std::span<double> grad_bias);

// scores[i] = rows[i,:] . query
void dot_scan(std::span<const double> rows, std::size_t dim, std::span<const double> query,
              std::span<double> scores);

// scores[i] = sum_s tables[s * ksub + codes[i * m + s]]
void adc_scan(std::span<const std::uint8_t> codes, std::size_t m, std::span<const double> tables,
              std::size_t ksub, std::span<double> scores);

// Nearest centroid by squared distance; ties go to the lowest index.
void assign_nearest(std::span<const double> points, std::size_t dim,
                    std::span<const double> centroids, std::span<std::uint32_t> labels,
                    std::span<double> sq_dist);

}  // namespace reference

namespace parallel {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output);

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weights, std::span<const double> grad_output,
                     std::span<double> grad_input, std::span<double> grad_weights,
                     std::span<double> grad_bias);

void dot_scan(std::span<const double> rows, std::size_t dim, std::span<const double> query,
              std::span<double> scores);

void adc_scan(std::span<const std::uint8_t> codes, std::size_t m, std::span<const double> tables,
              std::size_t ksub, std::span<double> scores);

void assign_nearest(std::span<const double> points, std::size_t dim,
                    std::span<const double> centroids, std::span<std::uint32_t> labels,
                    std::span<double> sq_dist);

}  // namespace parallel

int max_threads();

}  // namespace deepir::kernels
