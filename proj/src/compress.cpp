#include "deepir/compress.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "deepir/binary_io.hpp"
#include "deepir/kernels.hpp"
#include "deepir/rmac.hpp"

namespace deepir {

PcaCompressor pca_compress_train(const std::vector<Tensor>& descriptors, std::size_t out_dim) {
  if (out_dim == 0) throw std::invalid_argument("pca_compress_train: output dimension must be positive");
  if (descriptors.size() <= out_dim) {
    throw std::invalid_argument("pca_compress_train: need more than " + std::to_string(out_dim) +
                                " samples, got " + std::to_string(descriptors.size()));
  }
  const CovarianceEigen eig = covariance_eigen(descriptors);
  const std::size_t d = eig.mean.size();
  if (out_dim > d) {
    throw std::invalid_argument("pca_compress_train: output dimension " + std::to_string(out_dim) +
                                " exceeds input dimension " + std::to_string(d));
  }
  const double top = eig.eigenvalues[0];
  std::size_t rank = 0;
  while (rank < d && eig.eigenvalues[rank] > std::max(top * 1e-10, 1e-300)) ++rank;
  if (rank < out_dim) {
    throw std::invalid_argument("pca_compress_train: data rank " + std::to_string(rank) +
                                " < requested " + std::to_string(out_dim));
  }
  PcaCompressor pca{eig.mean, Tensor({out_dim, d})};
  std::copy_n(eig.eigenvectors.data(), out_dim * d, pca.components.data());
  return pca;
}

Tensor pca_project(const PcaCompressor& pca, const Tensor& v) {
  if (v.size() != pca.in_dim()) {
    throw DimensionError("pca_project: input has dimension " + std::to_string(v.size()) +
                         ", compressor expects " + std::to_string(pca.in_dim()));
  }
  Tensor out = shift_fc(v, pca.mean, pca.components).output;
  Tensor unit = Tensor::zeros_like(out);
  detail::l2_normalize_forward(out.values(), unit.values(), kNormEps);
  return unit;
}

std::string encode_pca_compressor(const PcaCompressor& pca) {
  BinaryWriter w;
  w.magic("IRPP");
  w.u32(kPcaCompressorVersion);
  w.u32(static_cast<std::uint32_t>(pca.in_dim()));
  w.u32(static_cast<std::uint32_t>(pca.out_dim()));
  for (double v : pca.mean.values()) w.f64(v);
  for (double v : pca.components.values()) w.f64(v);
  return w.buffer();
}

PcaCompressor decode_pca_compressor(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("IRPP");
  r.expect_version(kPcaCompressorVersion);
  const std::size_t d = r.u32(), dp = r.u32();
  if (d == 0 || dp == 0 || dp > d) throw FormatError(source + ": invalid dimensions");
  PcaCompressor pca{Tensor({d}), Tensor({dp, d})};
  for (double& v : pca.mean.values()) v = r.f64();
  for (double& v : pca.components.values()) v = r.f64();
  r.expect_end();
  return pca;
}

namespace {

struct WeightedPoints {
  std::vector<double> values;  // n x dim, lexicographically sorted, unique
  std::vector<double> weights;
  std::size_t dim = 0;
  std::size_t size() const { return weights.size(); }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

WeightedPoints unique_subvectors(const std::vector<Tensor>& data, std::size_t s, std::size_t dim) {
  std::map<std::vector<double>, double> counts;
  for (const auto& v : data) {
    std::vector<double> key(v.data() + s * dim, v.data() + (s + 1) * dim);
    counts[std::move(key)] += 1.0;
  }
  WeightedPoints pts;
  pts.dim = dim;
  for (const auto& [key, w] : counts) {
    pts.values.insert(pts.values.end(), key.begin(), key.end());
    pts.weights.push_back(w);
  }
  return pts;
}

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

// Weighted k-means with k-means++ seeding. Returns ksub x dim centroids.
std::vector<double> kmeans(const WeightedPoints& pts, std::size_t ksub, std::size_t iterations,
                           std::mt19937_64& rng, std::vector<double>* errors) {
  const std::size_t n = pts.size(), dim = pts.dim;
  std::vector<double> centroids(ksub * dim);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto place = [&](std::size_t c, std::size_t p) {
    std::copy_n(pts.row(p), dim, centroids.data() + c * dim);
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_dist(pts.row(i), pts.row(p), dim));
    }
  };
  // First seed proportional to weight, later seeds to weight * squared distance.
  auto draw = [&](bool by_distance) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += pts.weights[i] * (by_distance ? best[i] : 1.0);
    const double target = unit(rng) * total;
    double acc = 0.0;
    std::size_t last = n;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = pts.weights[i] * (by_distance ? best[i] : 1.0);
      if (w <= 0.0) continue;
      acc += w;
      last = i;
      if (acc > target) return i;
    }
    return last;
  };
  place(0, draw(false));
  for (std::size_t c = 1; c < ksub; ++c) place(c, draw(true));

  std::vector<std::uint32_t> labels(n), previous;
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < iterations; ++it) {
    kernels::parallel::assign_nearest(pts.values, dim, centroids, labels, dist);
    double err = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err += pts.weights[i] * dist[i];
      wsum += pts.weights[i];
    }
    if (errors) errors->push_back(err / wsum);
    if (labels == previous) break;
    previous = labels;

    std::vector<double> sums(ksub * dim, 0.0), mass(ksub, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      mass[labels[i]] += pts.weights[i];
      for (std::size_t k = 0; k < dim; ++k) sums[labels[i] * dim + k] += pts.weights[i] * pts.row(i)[k];
    }
    for (std::size_t c = 0; c < ksub; ++c) {
      if (mass[c] > 0.0) {
        for (std::size_t k = 0; k < dim; ++k) centroids[c * dim + k] = sums[c * dim + k] / mass[c];
        continue;
      }
      // Empty cluster: move it onto the worst-served point (lowest index on ties).
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (dist[i] > dist[far]) far = i;
      }
      std::copy_n(pts.row(far), dim, centroids.data() + c * dim);
      dist[far] = 0.0;
    }
  }
  return centroids;
}

void check_pq_dims(const PqCodebook& cb, std::size_t d, const char* what) {
  if (d != cb.dim()) {
    throw DimensionError(std::string(what) + ": vector has dimension " + std::to_string(d) +
                         ", codebook expects " + std::to_string(cb.dim()));
  }
}

}  // namespace

PqCodebook pq_train(const std::vector<Tensor>& descriptors, const PqTrainConfig& cfg,
                    PqTrainStats* stats) {
  if (cfg.m == 0) throw std::invalid_argument("pq_train: m must be positive");
  if (cfg.ksub == 0 || cfg.ksub > 256) throw std::invalid_argument("pq_train: ksub must be in [1, 256]");
  if (descriptors.size() < cfg.ksub) {
    throw std::invalid_argument("pq_train: need at least " + std::to_string(cfg.ksub) +
                                " training vectors, got " + std::to_string(descriptors.size()));
  }
  const std::size_t d = descriptors.front().size();
  for (const auto& v : descriptors) {
    if (v.size() != d) throw DimensionError("pq_train: training vectors differ in length");
  }
  if (d % cfg.m != 0) {
    throw std::invalid_argument("pq_train: dimension " + std::to_string(d) +
                                " is not divisible by m = " + std::to_string(cfg.m));
  }
  PqCodebook cb{cfg.m, d / cfg.m, cfg.ksub, Tensor({cfg.m, cfg.ksub, d / cfg.m})};
  if (stats) stats->errors.assign(cfg.m, {});
  for (std::size_t s = 0; s < cfg.m; ++s) {
    const WeightedPoints pts = unique_subvectors(descriptors, s, cb.subdim);
    if (pts.size() < cfg.ksub) {
      throw std::invalid_argument("pq_train: subpart " + std::to_string(s) + " has only " +
                                  std::to_string(pts.size()) + " distinct values for " +
                                  std::to_string(cfg.ksub) + " centroids");
    }
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(s)};
    std::mt19937_64 rng(seq);
    const auto c = kmeans(pts, cfg.ksub, cfg.iterations, rng, stats ? &stats->errors[s] : nullptr);
    std::copy(c.begin(), c.end(), cb.centroids.data() + s * cfg.ksub * cb.subdim);
  }
  return cb;
}

PqCode pq_encode(const Tensor& v, const PqCodebook& cb) {
  check_pq_dims(cb, v.size(), "pq_encode");
  PqCode code(cb.m);
  std::uint32_t label = 0;
  double dist = 0.0;
  for (std::size_t s = 0; s < cb.m; ++s) {
    kernels::reference::assign_nearest({v.data() + s * cb.subdim, cb.subdim}, cb.subdim,
                                       {cb.centroids.data() + s * cb.ksub * cb.subdim, cb.ksub * cb.subdim},
                                       {&label, 1}, {&dist, 1});
    code[s] = static_cast<std::uint8_t>(label);
  }
  return code;
}

Tensor pq_decode(const PqCode& code, const PqCodebook& cb) {
  if (code.size() != cb.m) throw DimensionError("pq_decode: code length differs from m");
  Tensor out({cb.dim()});
  for (std::size_t s = 0; s < cb.m; ++s) {
    if (code[s] >= cb.ksub) throw FormatError("pq_decode: code byte exceeds centroid count");
    const auto c = cb.centroid(s, code[s]);
    std::copy(c.begin(), c.end(), out.data() + s * cb.subdim);
  }
  return out;
}

Tensor adc_tables(const PqCodebook& cb, const Tensor& query) {
  check_pq_dims(cb, query.size(), "adc_tables");
  Tensor t({cb.m, cb.ksub});
  for (std::size_t s = 0; s < cb.m; ++s) {
    for (std::size_t c = 0; c < cb.ksub; ++c) {
      const auto cent = cb.centroid(s, c);
      double acc = 0.0;
      for (std::size_t k = 0; k < cb.subdim; ++k) acc += query[s * cb.subdim + k] * cent[k];
      t.at(s, c) = acc;
    }
  }
  return t;
}

PqCodes pq_encode_index(const RetrievalIndex& index, const PqCodebook& cb) {
  PqCodes codes{cb.m, std::vector<std::uint8_t>(index.size() * cb.m), index.ids};
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < index.size(); ++i) {
    Tensor v({index.dim()});
    std::copy(index.row(i).begin(), index.row(i).end(), v.data());
    const PqCode c = pq_encode(v, cb);
    std::copy(c.begin(), c.end(), codes.bytes.begin() + static_cast<std::ptrdiff_t>(i * cb.m));
  }
  return codes;
}

std::vector<double> pq_adc_scores(const PqCodes& codes, const PqCodebook& cb, const Tensor& query) {
  if (codes.m != cb.m) throw DimensionError("pq_adc_scores: code length differs from codebook m");
  const Tensor tables = adc_tables(cb, query);
  std::vector<double> scores(codes.size());
  kernels::parallel::adc_scan(codes.bytes, cb.m, tables.values(), cb.ksub, scores);
  return scores;
}

RankedList pq_adc_search(const PqCodes& codes, const PqCodebook& cb, const Tensor& query,
                         std::size_t topk) {
  const auto scores = pq_adc_scores(codes, cb, query);
  RankedList all(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) all[i] = {codes.ids[i], scores[i]};
  const std::size_t k = topk == 0 ? all.size() : std::min(topk, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const Scored& a, const Scored& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.id < b.id;
                    });
  all.resize(k);
  return all;
}

std::string encode_codebook(const PqCodebook& cb) {
  BinaryWriter w;
  w.magic("IRPQ");
  w.u32(kCodebookVersion);
  w.u32(static_cast<std::uint32_t>(cb.m));
  w.u32(static_cast<std::uint32_t>(cb.subdim));
  w.u32(static_cast<std::uint32_t>(cb.ksub));
  for (double v : cb.centroids.values()) w.f64(v);
  return w.buffer();
}

PqCodebook decode_codebook(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("IRPQ");
  r.expect_version(kCodebookVersion);
  const std::size_t m = r.u32(), subdim = r.u32(), ksub = r.u32();
  if (m == 0 || subdim == 0 || ksub == 0 || ksub > 256) {
    throw FormatError(source + ": invalid codebook dimensions");
  }
  if (r.remaining() != m * subdim * ksub * 8) throw FormatError(source + ": centroid block size mismatch");
  PqCodebook cb{m, subdim, ksub, Tensor({m, ksub, subdim})};
  for (double& v : cb.centroids.values()) v = r.f64();
  r.expect_end();
  return cb;
}

std::string encode_code_store(const PqCodes& codes) {
  BinaryWriter w;
  w.magic("IRPC");
  w.u32(kCodeStoreVersion);
  w.u64(codes.size());
  w.u32(static_cast<std::uint32_t>(codes.m));
  w.bytes({reinterpret_cast<const char*>(codes.bytes.data()), codes.bytes.size()});
  for (const auto& id : codes.ids) w.str(id);
  return w.buffer();
}

PqCodes decode_code_store(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("IRPC");
  r.expect_version(kCodeStoreVersion);
  const std::uint64_t count = r.u64();
  PqCodes codes;
  codes.m = r.u32();
  if (codes.m == 0 || r.remaining() / codes.m < count) throw FormatError(source + ": truncated codes");
  const auto raw = r.raw(count * codes.m);
  codes.bytes.assign(raw.begin(), raw.end());
  codes.ids.resize(count);
  for (auto& id : codes.ids) id = r.str();
  r.expect_end();
  return codes;
}

}  // namespace deepir
