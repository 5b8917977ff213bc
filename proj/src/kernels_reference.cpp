#include <limits>

#include "deepir/kernels.hpp"
#include "deepir/tensor.hpp"

namespace deepir::kernels {

ConvGeometry make_conv_geometry(std::size_t in_channels, std::size_t in_h, std::size_t in_w,
                                std::size_t out_channels, std::size_t kernel_h,
                                std::size_t kernel_w, std::size_t stride, std::size_t pad) {
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (kernel_h > in_h + 2 * pad || kernel_w > in_w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel_h) + "x" +
                         std::to_string(kernel_w) + " exceeds padded input " +
                         std::to_string(in_h + 2 * pad) + "x" + std::to_string(in_w + 2 * pad) +
                         " (axes H,W)");
  }
  ConvGeometry g;
  g.in_channels = in_channels;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_channels = out_channels;
  g.kernel_h = kernel_h;
  g.kernel_w = kernel_w;
  g.stride = stride;
  g.pad = pad;
  g.out_h = (in_h + 2 * pad - kernel_h) / stride + 1;
  g.out_w = (in_w + 2 * pad - kernel_w) / stride + 1;
  return g;
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        double acc = bias[co];
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              acc += weights[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] *
                     input[(ci * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                           static_cast<std::size_t>(ix)];
            }
          }
        }
        output[(co * g.out_h + oy) * g.out_w + ox] = acc;
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weights, std::span<const double> grad_output,
                     std::span<double> grad_input, std::span<double> grad_weights,
                     std::span<double> grad_bias) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const double go = grad_output[(co * g.out_h + oy) * g.out_w + ox];
        grad_bias[co] += go;
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              const std::size_t wi = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
              const std::size_t ii = (ci * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                     static_cast<std::size_t>(ix);
              grad_weights[wi] += go * input[ii];
              grad_input[ii] += go * weights[wi];
            }
          }
        }
      }
    }
  }
}

void dot_scan(std::span<const double> rows, std::size_t dim, std::span<const double> query,
              std::span<double> scores) {
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += rows[i * dim + k] * query[k];
    scores[i] = s;
  }
}

void adc_scan(std::span<const std::uint8_t> codes, std::size_t m, std::span<const double> tables,
              std::size_t ksub, std::span<double> scores) {
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double s = 0.0;
    for (std::size_t sub = 0; sub < m; ++sub) s += tables[sub * ksub + codes[i * m + sub]];
    scores[i] = s;
  }
}

void assign_nearest(std::span<const double> points, std::size_t dim,
                    std::span<const double> centroids, std::span<std::uint32_t> labels,
                    std::span<double> sq_dist) {
  const std::size_t k = centroids.size() / dim;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = points[i * dim + t] - centroids[j * dim + t];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_j = static_cast<std::uint32_t>(j);
      }
    }
    labels[i] = best_j;
    sq_dist[i] = best;
  }
}

}  // namespace reference
}  // namespace deepir::kernels
