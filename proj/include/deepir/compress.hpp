#pragma once

// Short codes: PCA projection and product quantization with asymmetric
// distance (ADC) scoring.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepir/engine.hpp"

namespace deepir {

struct PcaCompressor {
  Tensor mean;        // d
  Tensor components;  // d' x d, orthonormal rows in descending variance order

  std::size_t in_dim() const { return mean.size(); }
  std::size_t out_dim() const { return components.empty() ? 0 : components.dim(0); }
  // Bytes per projected descriptor when stored as 32-bit floats.
  std::size_t storage_bytes() const { return 4 * out_dim(); }
};

// Throws std::invalid_argument when there are not more samples than d' or the
// data has fewer than d' directions with variance.
PcaCompressor pca_compress_train(const std::vector<Tensor>& descriptors, std::size_t out_dim);
// Centres, projects and l2-normalizes.
Tensor pca_project(const PcaCompressor& pca, const Tensor& v);

// "IRPP", version u32, d u32, d' u32, mean (d f64), components (d' x d f64).
inline constexpr std::uint32_t kPcaCompressorVersion = 1;
std::string encode_pca_compressor(const PcaCompressor& pca);
PcaCompressor decode_pca_compressor(std::string bytes, const std::string& source = "pca");

struct PqCodebook {
  std::size_t m = 0;         // subquantizers, also the code length in bytes
  std::size_t subdim = 0;
  std::size_t ksub = 256;
  Tensor centroids;          // m x ksub x subdim

  std::size_t dim() const { return m * subdim; }
  std::span<const double> centroid(std::size_t s, std::size_t c) const {
    return {centroids.data() + (s * ksub + c) * subdim, subdim};
  }
};

struct PqTrainConfig {
  std::size_t m = 8;
  std::size_t ksub = 256;
  std::size_t iterations = 25;
  std::uint64_t seed = 0;
};

// Per subquantizer, the mean squared quantization error after each assignment step.
struct PqTrainStats {
  std::vector<std::vector<double>> errors;
};

// k-means++ seeding then Lloyd iterations, one independent problem per subpart.
// Identical points are merged with multiplicity weights first, so the codebook
// ignores input order and duplication. Empty clusters are reseeded at the
// point farthest from its centroid.
PqCodebook pq_train(const std::vector<Tensor>& descriptors, const PqTrainConfig& cfg,
                    PqTrainStats* stats = nullptr);

using PqCode = std::vector<std::uint8_t>;

// Nearest centroid per subpart, ties to the lowest index.
PqCode pq_encode(const Tensor& v, const PqCodebook& cb);
Tensor pq_decode(const PqCode& code, const PqCodebook& cb);

// m x ksub table of query-subpart / centroid dot products.
Tensor adc_tables(const PqCodebook& cb, const Tensor& query);

struct PqCodes {
  std::size_t m = 0;
  std::vector<std::uint8_t> bytes;  // count x m
  std::vector<std::string> ids;

  std::size_t size() const { return ids.size(); }
  PqCode code(std::size_t i) const {
    return PqCode(bytes.begin() + static_cast<std::ptrdiff_t>(i * m),
                  bytes.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
  }
};

PqCodes pq_encode_index(const RetrievalIndex& index, const PqCodebook& cb);
// score_i = sum_s table[s][code_i[s]], identical to summing per-subpart dot
// products of the query with the decoded vector.
std::vector<double> pq_adc_scores(const PqCodes& codes, const PqCodebook& cb, const Tensor& query);
RankedList pq_adc_search(const PqCodes& codes, const PqCodebook& cb, const Tensor& query,
                         std::size_t topk = 0);

// Codebook: "IRPQ", version u32, m u32, subdim u32, centroid count u32, f64 centroids.
inline constexpr std::uint32_t kCodebookVersion = 1;
std::string encode_codebook(const PqCodebook& cb);
PqCodebook decode_codebook(std::string bytes, const std::string& source = "codebook");

// Code store: "IRPC", version u32, count u64, m u32, count x m bytes, then
// count length-prefixed ids.
inline constexpr std::uint32_t kCodeStoreVersion = 1;
std::string encode_code_store(const PqCodes& codes);
PqCodes decode_code_store(std::string bytes, const std::string& source = "codes");

}  // namespace deepir
