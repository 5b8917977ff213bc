#include <omp.h>

#include <algorithm>
#include <limits>
#include <vector>

#include "deepir/kernels.hpp"

namespace deepir::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace {

// col[p * K + k] holds input sample k = (ci, ky, kx) of output pixel p; zero in padding.
std::vector<double> im2col(const ConvGeometry& g, std::span<const double> input) {
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t kdim = g.patch_size();
  std::vector<double> col(pixels * kdim, 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(pixels); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    const std::size_t oy = p / g.out_w;
    const std::size_t ox = p % g.out_w;
    double* row = col.data() + p * kdim;
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          row[(ci * g.kernel_h + ky) * g.kernel_w + kx] =
              input[(ci * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                    static_cast<std::size_t>(ix)];
        }
      }
    }
  }
  return col;
}

}  // namespace

namespace parallel {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output) {
  const std::vector<double> col = im2col(g, input);
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t kdim = g.patch_size();
  // Blocks of 4 output channels x 2 pixels give eight independent accumulator
  // chains; each output still sums its terms in k order, matching the reference.
  const std::size_t cblocks = (g.out_channels + 3) / 4;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bb = 0; bb < static_cast<std::ptrdiff_t>(cblocks); ++bb) {
    const std::size_t c0 = static_cast<std::size_t>(bb) * 4;
    const std::size_t cn = std::min<std::size_t>(4, g.out_channels - c0);
    if (cn < 4) {
      for (std::size_t co = c0; co < c0 + cn; ++co) {
        const double* w = weights.data() + co * kdim;
        for (std::size_t p = 0; p < pixels; ++p) {
          const double* x = col.data() + p * kdim;
          double acc = bias[co];
          for (std::size_t k = 0; k < kdim; ++k) acc += w[k] * x[k];
          output[co * pixels + p] = acc;
        }
      }
      continue;
    }
    const double* w0 = weights.data() + c0 * kdim;
    const double* w1 = w0 + kdim;
    const double* w2 = w1 + kdim;
    const double* w3 = w2 + kdim;
    std::size_t p = 0;
    for (; p + 1 < pixels; p += 2) {
      const double* x = col.data() + p * kdim;
      const double* y = x + kdim;
      double a0 = bias[c0], a1 = bias[c0 + 1], a2 = bias[c0 + 2], a3 = bias[c0 + 3];
      double b0 = a0, b1 = a1, b2 = a2, b3 = a3;
      for (std::size_t k = 0; k < kdim; ++k) {
        const double xk = x[k], yk = y[k];
        a0 += w0[k] * xk;
        a1 += w1[k] * xk;
        a2 += w2[k] * xk;
        a3 += w3[k] * xk;
        b0 += w0[k] * yk;
        b1 += w1[k] * yk;
        b2 += w2[k] * yk;
        b3 += w3[k] * yk;
      }
      output[c0 * pixels + p] = a0;
      output[(c0 + 1) * pixels + p] = a1;
      output[(c0 + 2) * pixels + p] = a2;
      output[(c0 + 3) * pixels + p] = a3;
      output[c0 * pixels + p + 1] = b0;
      output[(c0 + 1) * pixels + p + 1] = b1;
      output[(c0 + 2) * pixels + p + 1] = b2;
      output[(c0 + 3) * pixels + p + 1] = b3;
    }
    for (; p < pixels; ++p) {
      const double* x = col.data() + p * kdim;
      for (std::size_t co = c0; co < c0 + 4; ++co) {
        const double* w = weights.data() + co * kdim;
        double acc = bias[co];
        for (std::size_t k = 0; k < kdim; ++k) acc += w[k] * x[k];
        output[co * pixels + p] = acc;
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input,
                     std::span<const double> weights, std::span<const double> grad_output,
                     std::span<double> grad_input, std::span<double> grad_weights,
                     std::span<double> grad_bias) {
  const std::vector<double> col = im2col(g, input);
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t kdim = g.patch_size();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.out_channels); ++cc) {
    const auto co = static_cast<std::size_t>(cc);
    const double* go = grad_output.data() + co * pixels;
    double* gw = grad_weights.data() + co * kdim;
    double gb = grad_bias[co];
    for (std::size_t p = 0; p < pixels; ++p) {
      gb += go[p];
      if (go[p] == 0.0) continue;
      const double* x = col.data() + p * kdim;
      for (std::size_t k = 0; k < kdim; ++k) gw[k] += go[p] * x[k];
    }
    grad_bias[co] = gb;
  }

  std::vector<double> gcol(pixels * kdim, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(pixels); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    double* row = gcol.data() + p * kdim;
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const double go = grad_output[co * pixels + p];
      if (go == 0.0) continue;
      const double* w = weights.data() + co * kdim;
      for (std::size_t k = 0; k < kdim; ++k) row[k] += go * w[k];
    }
  }

  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.in_channels); ++cc) {
    const auto ci = static_cast<std::size_t>(cc);
    for (std::size_t p = 0; p < pixels; ++p) {
      const std::size_t oy = p / g.out_w;
      const std::size_t ox = p % g.out_w;
      const double* row = gcol.data() + p * kdim;
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          grad_input[(ci * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                     static_cast<std::size_t>(ix)] += row[(ci * g.kernel_h + ky) * g.kernel_w + kx];
        }
      }
    }
  }
}

void dot_scan(std::span<const double> rows, std::size_t dim, std::span<const double> query,
              std::span<double> scores) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(scores.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* r = rows.data() + i * dim;
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += r[k] * query[k];
    scores[i] = s;
  }
}

void adc_scan(std::span<const std::uint8_t> codes, std::size_t m, std::span<const double> tables,
              std::size_t ksub, std::span<double> scores) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(scores.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const std::uint8_t* c = codes.data() + i * m;
    double s = 0.0;
    for (std::size_t sub = 0; sub < m; ++sub) s += tables[sub * ksub + c[sub]];
    scores[i] = s;
  }
}

void assign_nearest(std::span<const double> points, std::size_t dim,
                    std::span<const double> centroids, std::span<std::uint32_t> labels,
                    std::span<double> sq_dist) {
  const std::size_t k = centroids.size() / dim;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(labels.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* x = points.data() + i * dim;
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double* c = centroids.data() + j * dim;
      double d = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = x[t] - c[t];
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

}  // namespace parallel
}  // namespace deepir::kernels
