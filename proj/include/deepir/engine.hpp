#pragma once

// Exact dot-product retrieval over l2-normalized descriptors, query expansion,
// database-side augmentation and rotated querying.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepir/model.hpp"

namespace deepir {

inline constexpr double kUnitNormTolerance = 1e-6;

struct RetrievalIndex {
  Tensor descriptors;  // n x d (0 x 0 when empty)
  std::vector<std::string> ids;
  bool augmented = false;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return ids.empty() ? 0 : descriptors.dim(1); }
  std::span<const double> row(std::size_t i) const {
    return {descriptors.data() + i * dim(), dim()};
  }
};

struct Scored {
  std::string id;
  double score = 0.0;
  friend bool operator==(const Scored&, const Scored&) = default;
};

// Scores descending, ties by ascending id.
using RankedList = std::vector<Scored>;

// Throws std::invalid_argument on duplicate ids, count mismatch, differing
// lengths or rows whose norm is not 1 within kUnitNormTolerance.
RetrievalIndex build_index(const std::vector<Tensor>& descriptors, std::vector<std::string> ids,
                           bool augmented = false);

// Top-k by dot product over the full index; topk == 0 returns every row.
RankedList search(const RetrievalIndex& index, const Tensor& query, std::size_t topk = 0);

// Second query with l2(q + sum of the first k_qe results). k_qe is clamped to the index size.
RankedList query_expansion(const RetrievalIndex& index, const Tensor& query, std::size_t k_qe,
                           std::size_t topk = 0);
// The expanded query itself (q when k_qe == 0).
Tensor expand_query(const RetrievalIndex& index, const Tensor& query, std::size_t k_qe);

// Every row becomes l2(sum_r (k - r)/k d_r) over its k nearest rows (r = 0 is
// the row itself), neighbours taken from the input index. k_dba <= 1 is an identity.
RetrievalIndex dba_augment(const RetrievalIndex& index, std::size_t k_dba);
// (k - r) / k.
double dba_weight(std::size_t rank, std::size_t k_dba);

// Per database row, the maximum score over the query variants.
RankedList max_over_queries(const RetrievalIndex& index, const std::vector<Tensor>& queries,
                            std::size_t topk = 0);

// The image at 0, 90 and 270 degrees counter-clockwise.
std::vector<Image> rotation_variants(const Image& image);

// Describes each rotation of the query and merges with max_over_queries.
RankedList rotation_search(const RetrievalIndex& index, const Image& query, const RmacModel& model,
                           std::span<const std::size_t> scales, std::size_t topk = 0);

// Descriptor store: "IRDS", version u32, count u64, dim u32, flags u32 (bit 0:
// values stored as f32, bit 1: augmented), count x dim values, then count
// length-prefixed ids.
inline constexpr std::uint32_t kDescriptorStoreVersion = 1;
std::string encode_descriptor_store(const RetrievalIndex& index, bool f32 = false);
// Rows are validated like build_index; f32 stores are checked with tolerance 1e-5.
RetrievalIndex decode_descriptor_store(std::string bytes, const std::string& source = "descriptors");
void save_descriptor_store(const std::filesystem::path& path, const RetrievalIndex& index,
                           bool f32 = false);
RetrievalIndex load_descriptor_store(const std::filesystem::path& path);

// "query_id\trank\tdb_id\tscore" lines, ranks starting at 1.
std::string format_ranked_list(const std::string& query_id, const RankedList& list);

}  // namespace deepir
