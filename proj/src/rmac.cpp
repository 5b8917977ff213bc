#include "deepir/rmac.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace deepir {

namespace {

std::size_t axis_count(std::size_t len, double side, double overlap) {
  const double span = static_cast<double>(len) - side;
  if (span <= 0.0) return 1;
  const double max_step = (1.0 - overlap) * side;
  const auto n = 1 + static_cast<std::size_t>(std::ceil(span / max_step - 1e-9));
  // Never more regions than distinct integer offsets.
  return std::min(n, 1 + static_cast<std::size_t>(std::floor(span)));
}

std::vector<std::size_t> axis_positions(std::size_t len, std::size_t side, std::size_t count) {
  const std::size_t span = len > side ? len - side : 0;
  if (count <= 1) return {span / 2};
  std::vector<std::size_t> pos(count);
  const std::size_t den = count - 1;
  for (std::size_t i = 0; i < count; ++i) pos[i] = (2 * i * span + den) / (2 * den);
  return pos;
}

}  // namespace

std::vector<Region> rigid_grid(std::size_t w, std::size_t h, std::size_t levels, double overlap) {
  if (w == 0 || h == 0) throw DimensionError("rigid_grid: map must be at least 1x1");
  if (levels == 0) throw std::invalid_argument("rigid_grid: levels must be >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0)) {
    throw std::invalid_argument("rigid_grid: overlap must lie in [0, 1)");
  }
  std::vector<Region> regions;
  const double short_side = static_cast<double>(std::min(w, h));
  std::size_t last_side = 0;
  for (std::size_t l = 1; l <= levels; ++l) {
    const double exact = 2.0 * short_side / static_cast<double>(l + 1);
    const auto side = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact)));
    // On tiny maps two levels can floor to the same side; keep the coarser one only.
    if (side == last_side) continue;
    last_side = side;
    const auto xs = axis_positions(w, side, axis_count(w, exact, overlap));
    const auto ys = axis_positions(h, side, axis_count(h, exact, overlap));
    for (std::size_t y : ys) {
      for (std::size_t x : xs) {
        const Region r{x, y, std::min(x + side, w), std::min(y + side, h)};
        if (std::find(regions.begin(), regions.end(), r) == regions.end()) regions.push_back(r);
      }
    }
  }
  return regions;
}

void validate_regions(const std::vector<Region>& regions, std::size_t w, std::size_t h) {
  for (const auto& r : regions) {
    if (!(r.x0 < r.x1 && r.x1 <= w && r.y0 < r.y1 && r.y1 <= h)) {
      throw DimensionError("region [" + std::to_string(r.x0) + "," + std::to_string(r.y0) + "," +
                           std::to_string(r.x1) + "," + std::to_string(r.y1) +
                           ") invalid for feature map " + std::to_string(w) + "x" +
                           std::to_string(h));
    }
  }
}

PcaLayer PcaLayer::identity(std::size_t dim) {
  PcaLayer p{Tensor({dim}), Tensor({dim, dim})};
  for (std::size_t i = 0; i < dim; ++i) p.projection.at(i, i) = 1.0;
  return p;
}

RoiPool roi_max_pool_forward(const Tensor& fm, const std::vector<Region>& regions) {
  if (fm.rank() != 3) {
    throw DimensionError("roi_max_pool: feature map must be C x h x w, got " +
                         shape_to_string(fm.shape()));
  }
  if (regions.empty()) throw std::invalid_argument("roi_max_pool: empty region list");
  const std::size_t c = fm.dim(0), h = fm.dim(1), w = fm.dim(2);
  validate_regions(regions, w, h);
  RoiPool pool{Tensor({regions.size(), c}), std::vector<std::size_t>(regions.size() * c)};
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const Region& reg = regions[r];
    for (std::size_t ch = 0; ch < c; ++ch) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_off = 0;
      for (std::size_t y = reg.y0; y < reg.y1; ++y) {
        const std::size_t row = (ch * h + y) * w;
        for (std::size_t x = reg.x0; x < reg.x1; ++x) {
          if (fm[row + x] > best) {
            best = fm[row + x];
            best_off = row + x;
          }
        }
      }
      pool.pooled.at(r, ch) = best;
      pool.argmax[r * c + ch] = best_off;
    }
  }
  return pool;
}

void roi_max_pool_backward(const RoiPool& pool, const Tensor& grad_pooled, Tensor& grad_fm) {
  require_same_shape(pool.pooled, grad_pooled, "roi_max_pool backward");
  for (std::size_t i = 0; i < pool.argmax.size(); ++i) grad_fm[pool.argmax[i]] += grad_pooled[i];
}

DualResult roi_max_pool(const Tensor& fm, const std::vector<Region>& regions) {
  RoiPool pool = roi_max_pool_forward(fm, regions);
  Tensor out = pool.pooled;
  const Shape fm_shape = fm.shape();
  return {std::move(out), [pool = std::move(pool), fm_shape](const Tensor& upstream) {
            Tensor g(fm_shape);
            roi_max_pool_backward(pool, upstream, g);
            return std::vector<Tensor>{std::move(g)};
          }};
}

RmacTrace rmac_forward(const Tensor& fm, const std::vector<Region>& regions, const PcaLayer& pca) {
  RmacTrace t;
  t.pool = roi_max_pool_forward(fm, regions);
  const std::size_t r_count = regions.size();
  const std::size_t c = fm.dim(0);
  if (pca.in_dim() != c || pca.projection.rank() != 2 || pca.projection.dim(1) != c) {
    throw DimensionError("rmac: PCA layer expects " + std::to_string(pca.in_dim()) +
                         " features, feature map has " + std::to_string(c) + " channels");
  }
  const std::size_t d = pca.out_dim();

  t.normalized = Tensor({r_count, c});
  t.centered = Tensor({r_count, c});
  t.projected = Tensor({r_count, d});
  t.region_descriptors = Tensor({r_count, d});
  t.normalized_denom.resize(r_count);
  t.normalized_clamped.resize(r_count);
  t.region_denom.resize(r_count);
  t.region_clamped.resize(r_count);
  t.aggregate = Tensor({d});

  for (std::size_t r = 0; r < r_count; ++r) {
    const std::span<const double> pooled(t.pool.pooled.data() + r * c, c);
    const std::span<double> norm(t.normalized.data() + r * c, c);
    t.normalized_clamped[r] = l2_norm(pooled) < kNormEps;
    t.normalized_denom[r] = detail::l2_normalize_forward(pooled, norm, kNormEps);

    double* centered = t.centered.data() + r * c;
    for (std::size_t k = 0; k < c; ++k) centered[k] = norm[k] - pca.shift[k];
    double* proj = t.projected.data() + r * d;
    for (std::size_t o = 0; o < d; ++o) {
      const double* wrow = pca.projection.data() + o * c;
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += wrow[k] * centered[k];
      proj[o] = acc;
    }
    const std::span<const double> proj_span(proj, d);
    const std::span<double> desc(t.region_descriptors.data() + r * d, d);
    t.region_clamped[r] = l2_norm(proj_span) < kNormEps;
    t.region_denom[r] = detail::l2_normalize_forward(proj_span, desc, kNormEps);
    for (std::size_t o = 0; o < d; ++o) t.aggregate[o] += desc[o];
  }
  t.descriptor = Tensor({d});
  t.aggregate_clamped = l2_norm(t.aggregate.values()) < kNormEps;
  t.aggregate_denom =
      detail::l2_normalize_forward(t.aggregate.values(), t.descriptor.values(), kNormEps);
  return t;
}

void rmac_backward(const RmacTrace& t, const PcaLayer& pca, const Tensor& grad_descriptor,
                   Tensor& grad_fm, PcaLayer& grad_pca) {
  require_same_shape(t.descriptor, grad_descriptor, "rmac backward");
  const std::size_t r_count = t.normalized.dim(0);
  const std::size_t c = t.normalized.dim(1);
  const std::size_t d = t.descriptor.size();

  Tensor g_agg({d});
  detail::l2_normalize_backward(t.descriptor.values(), t.aggregate_denom, t.aggregate_clamped,
                                grad_descriptor.values(), g_agg.values());

  Tensor g_pooled({r_count, c});
  std::vector<double> g_proj(d);
  std::vector<double> g_norm(c);
  for (std::size_t r = 0; r < r_count; ++r) {
    // Sum aggregation hands g_agg to every region descriptor.
    detail::l2_normalize_backward({t.region_descriptors.data() + r * d, d}, t.region_denom[r],
                                  t.region_clamped[r], g_agg.values(), g_proj);
    std::fill(g_norm.begin(), g_norm.end(), 0.0);
    const double* centered = t.centered.data() + r * c;
    for (std::size_t o = 0; o < d; ++o) {
      const double g = g_proj[o];
      const double* wrow = pca.projection.data() + o * c;
      double* gw = grad_pca.projection.data() + o * c;
      for (std::size_t k = 0; k < c; ++k) {
        gw[k] += g * centered[k];
        g_norm[k] += wrow[k] * g;
      }
    }
    for (std::size_t k = 0; k < c; ++k) grad_pca.shift[k] -= g_norm[k];
    detail::l2_normalize_backward({t.normalized.data() + r * c, c}, t.normalized_denom[r],
                                  t.normalized_clamped[r], g_norm,
                                  {g_pooled.data() + r * c, c});
  }
  roi_max_pool_backward(t.pool, g_pooled, grad_fm);
}

DualResult rmac_descriptor(const Tensor& fm, const std::vector<Region>& regions,
                           const PcaLayer& pca) {
  RmacTrace trace = rmac_forward(fm, regions, pca);
  Tensor out = trace.descriptor;
  const Shape fm_shape = fm.shape();
  return {std::move(out), [trace = std::move(trace), pca, fm_shape](const Tensor& upstream) {
            Tensor gfm(fm_shape);
            PcaLayer gp = pca.zeros_like();
            rmac_backward(trace, pca, upstream, gfm, gp);
            return std::vector<Tensor>{std::move(gfm), std::move(gp.shift),
                                       std::move(gp.projection)};
          }};
}

CovarianceEigen covariance_eigen(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("covariance: no samples");
  const std::size_t d = rows.front().size();
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Tensor& r = rows[static_cast<std::size_t>(i)];
    if (r.size() != d) {
      throw DimensionError("covariance: sample " + std::to_string(i) + " has length " +
                           std::to_string(r.size()) + ", expected " + std::to_string(d));
    }
    for (std::size_t k = 0; k < d; ++k) x(i, static_cast<Eigen::Index>(k)) = r[k];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("covariance: eigensolver failed");

  CovarianceEigen out{Tensor({d}), Tensor({d}), Tensor({d, d})};
  for (std::size_t k = 0; k < d; ++k) out.mean[k] = mean(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < d; ++i) {
    // Eigen sorts ascending.
    const auto src = static_cast<Eigen::Index>(d - 1 - i);
    out.eigenvalues[i] = std::max(0.0, solver.eigenvalues()(src));
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t k = 0; k < d; ++k) out.eigenvectors.at(i, k) = v(static_cast<Eigen::Index>(k));
  }
  return out;
}

PcaLayer pca_init(const std::vector<Tensor>& region_vectors, std::size_t out_dim) {
  if (out_dim == 0) throw std::invalid_argument("pca_init: output dimension must be positive");
  if (region_vectors.size() < out_dim) {
    throw std::invalid_argument("pca_init: need at least " + std::to_string(out_dim) +
                                " samples, got " + std::to_string(region_vectors.size()));
  }
  const CovarianceEigen eig = covariance_eigen(region_vectors);
  const std::size_t d = eig.mean.size();
  if (out_dim > d) {
    throw std::invalid_argument("pca_init: output dimension " + std::to_string(out_dim) +
                                " exceeds feature dimension " + std::to_string(d));
  }
  const double top = eig.eigenvalues[0];
  std::size_t rank = 0;
  while (rank < d && eig.eigenvalues[rank] > std::max(top * 1e-10, 1e-300)) ++rank;
  if (rank < out_dim) {
    throw std::invalid_argument("pca_init: covariance is rank deficient; usable rank " +
                                std::to_string(rank) + " < requested " + std::to_string(out_dim));
  }
  PcaLayer layer{eig.mean, Tensor({out_dim, d})};
  for (std::size_t i = 0; i < out_dim; ++i) {
    const double scale = 1.0 / std::sqrt(eig.eigenvalues[i]);
    for (std::size_t k = 0; k < d; ++k) layer.projection.at(i, k) = eig.eigenvectors.at(i, k) * scale;
  }
  return layer;
}

}  // namespace deepir
