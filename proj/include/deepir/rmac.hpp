#pragma once

// R-MAC head: rigid multi-scale grid, ROI max-pooling, and the
// l2 -> shift/FC -> l2 -> sum -> l2 chain, all with explicit backward passes.

#include <vector>

#include "deepir/ops.hpp"

namespace deepir {

// Feature-map cell rectangle [x0, x1) x [y0, y1).
struct Region {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  std::size_t width() const { return x1 - x0; }
  std::size_t height() const { return y1 - y0; }
  friend bool operator==(const Region&, const Region&) = default;
};

struct GridConfig {
  std::size_t levels = 3;
  double overlap = 0.4;
};

// Square regions of side floor(2 min(w,h) / (l+1)) at levels l = 1..L. Along each
// axis the region count is the smallest one whose consecutive overlap, measured
// with the unrounded side, reaches `overlap`; positions are evenly spaced and
// rounded, capped at the number of distinct offsets. A level whose side equals
// the previous level's is skipped, and duplicates are dropped.
std::vector<Region> rigid_grid(std::size_t w, std::size_t h, std::size_t levels,
                               double overlap = 0.4);

// Throws DimensionError if any region falls outside a w x h map or is empty.
void validate_regions(const std::vector<Region>& regions, std::size_t w, std::size_t h);

// Mean shift plus linear projection; initialized from whitened PCA.
struct PcaLayer {
  Tensor shift;       // d_feat
  Tensor projection;  // d_out x d_feat

  std::size_t in_dim() const { return shift.size(); }
  std::size_t out_dim() const { return projection.empty() ? 0 : projection.dim(0); }
  PcaLayer zeros_like() const { return {Tensor::zeros_like(shift), Tensor::zeros_like(projection)}; }
  // shift = 0, projection = identity.
  static PcaLayer identity(std::size_t dim);
};

struct RoiPool {
  Tensor pooled;                     // R x C
  std::vector<std::size_t> argmax;   // R x C flat offsets into the feature map
};

RoiPool roi_max_pool_forward(const Tensor& fm, const std::vector<Region>& regions);
// Adds each pooled gradient to the cell that won the max.
void roi_max_pool_backward(const RoiPool& pool, const Tensor& grad_pooled, Tensor& grad_fm);

// backward -> {grad_fm}. Ties resolve to the first cell in row-major order.
DualResult roi_max_pool(const Tensor& fm, const std::vector<Region>& regions);

// Everything the head needs to backpropagate.
struct RmacTrace {
  RoiPool pool;
  Tensor normalized;        // R x C, per-region l2
  std::vector<double> normalized_denom;
  std::vector<bool> normalized_clamped;
  Tensor centered;          // R x C, normalized - shift
  Tensor projected;         // R x D
  Tensor region_descriptors;  // R x D, l2 of projected
  std::vector<double> region_denom;
  std::vector<bool> region_clamped;
  Tensor aggregate;         // D, sum of region descriptors
  double aggregate_denom = 1.0;
  bool aggregate_clamped = false;
  Tensor descriptor;        // D, final output
};

RmacTrace rmac_forward(const Tensor& fm, const std::vector<Region>& regions, const PcaLayer& pca);

// Accumulates into grad_fm and grad_pca.
void rmac_backward(const RmacTrace& trace, const PcaLayer& pca, const Tensor& grad_descriptor,
                   Tensor& grad_fm, PcaLayer& grad_pca);

// backward -> {grad_fm, grad_shift, grad_projection}
DualResult rmac_descriptor(const Tensor& fm, const std::vector<Region>& regions,
                           const PcaLayer& pca);

// Whitened PCA over l2-normalized region vectors (population covariance). Rows
// are eigenvectors in descending eigenvalue order, divided by sqrt(eigenvalue),
// signed so their largest-magnitude entry is positive. Throws if fewer than
// out_dim directions carry variance.
PcaLayer pca_init(const std::vector<Tensor>& region_vectors, std::size_t out_dim);

// Eigen-decomposition used by pca_init and the compressor: returns (eigenvalues
// descending, eigenvectors as rows) of the population covariance of `rows`.
struct CovarianceEigen {
  Tensor mean;          // d
  Tensor eigenvalues;   // d, descending
  Tensor eigenvectors;  // d x d, row i pairs with eigenvalue i
};
CovarianceEigen covariance_eigen(const std::vector<Tensor>& rows);

}  // namespace deepir
