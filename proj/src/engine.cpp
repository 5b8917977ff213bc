#include "deepir/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "deepir/binary_io.hpp"
#include "deepir/kernels.hpp"

namespace deepir {

namespace {

RetrievalIndex make_index(const std::vector<Tensor>& descriptors, std::vector<std::string> ids,
                          bool augmented, double tolerance) {
  if (descriptors.size() != ids.size()) {
    throw std::invalid_argument("build_index: " + std::to_string(descriptors.size()) +
                                " descriptors but " + std::to_string(ids.size()) + " ids");
  }
  RetrievalIndex index;
  index.augmented = augmented;
  if (ids.empty()) return index;
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw std::invalid_argument("build_index: duplicate id " + id);
  }
  const std::size_t d = descriptors.front().size();
  index.descriptors = Tensor({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor& v = descriptors[i];
    if (v.rank() != 1 || v.size() != d) {
      throw DimensionError("build_index: descriptor " + ids[i] + " has shape " +
                           shape_to_string(v.shape()) + ", expected [" + std::to_string(d) + "]");
    }
    const double norm = l2_norm(v.values());
    if (!(std::abs(norm - 1.0) <= tolerance)) {
      throw std::invalid_argument("build_index: descriptor " + ids[i] + " has norm " +
                                  std::to_string(norm));
    }
    std::copy(v.values().begin(), v.values().end(), index.descriptors.data() + i * d);
  }
  index.ids = std::move(ids);
  return index;
}

// Order: score descending, then id ascending.
bool ranks_before(const Scored& a, const Scored& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

RankedList rank_scores(const RetrievalIndex& index, const std::vector<double>& scores,
                       std::size_t topk) {
  RankedList all(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) all[i] = {index.ids[i], scores[i]};
  const std::size_t k = topk == 0 ? all.size() : std::min(topk, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    ranks_before);
  all.resize(k);
  return all;
}

std::vector<double> score_all(const RetrievalIndex& index, const Tensor& query) {
  if (index.size() > 0 && query.size() != index.dim()) {
    throw DimensionError("search: query has dimension " + std::to_string(query.size()) +
                         " but the index has dimension " + std::to_string(index.dim()));
  }
  std::vector<double> scores(index.size());
  if (!scores.empty()) {
    kernels::parallel::dot_scan(index.descriptors.values(), index.dim(), query.values(), scores);
  }
  return scores;
}

std::vector<std::size_t> top_rows(const RetrievalIndex& index, const Tensor& query, std::size_t k) {
  const auto scores = score_all(index, query);
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return index.ids[a] < index.ids[b];
                    });
  order.resize(k);
  return order;
}

Tensor normalized(const Tensor& v) {
  Tensor out = Tensor::zeros_like(v);
  detail::l2_normalize_forward(v.values(), out.values(), kNormEps);
  return out;
}

}  // namespace

RetrievalIndex build_index(const std::vector<Tensor>& descriptors, std::vector<std::string> ids,
                           bool augmented) {
  return make_index(descriptors, std::move(ids), augmented, kUnitNormTolerance);
}

RankedList search(const RetrievalIndex& index, const Tensor& query, std::size_t topk) {
  return rank_scores(index, score_all(index, query), topk);
}

Tensor expand_query(const RetrievalIndex& index, const Tensor& query, std::size_t k_qe) {
  if (k_qe == 0 || index.size() == 0) return query;
  Tensor sum = query;
  for (std::size_t r : top_rows(index, query, k_qe)) {
    const auto row = index.row(r);
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += row[j];
  }
  return normalized(sum);
}

RankedList query_expansion(const RetrievalIndex& index, const Tensor& query, std::size_t k_qe,
                           std::size_t topk) {
  if (k_qe == 0) return search(index, query, topk);
  return search(index, expand_query(index, query, k_qe), topk);
}

double dba_weight(std::size_t rank, std::size_t k_dba) {
  const double k = static_cast<double>(k_dba);
  return (k - static_cast<double>(rank)) / k;
}

RetrievalIndex dba_augment(const RetrievalIndex& index, std::size_t k_dba) {
  RetrievalIndex out = index;
  out.augmented = true;
  if (k_dba <= 1 || index.size() == 0) return out;
  const std::size_t n = index.size(), d = index.dim();
  // Rows are read from `index` only, so every row sees the original neighbours.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    Tensor q({d});
    std::copy(index.row(i).begin(), index.row(i).end(), q.data());
    // The row itself leads its own neighbour list, whatever ties say.
    std::vector<std::size_t> nn = top_rows(index, q, k_dba);
    const auto self = std::find(nn.begin(), nn.end(), i);
    if (self != nn.end()) {
      nn.erase(self);
    } else {
      nn.pop_back();
    }
    nn.insert(nn.begin(), i);
    Tensor sum({d});
    for (std::size_t r = 0; r < nn.size(); ++r) {
      const double w = dba_weight(r, k_dba);
      const auto row = index.row(nn[r]);
      for (std::size_t j = 0; j < d; ++j) sum[j] += w * row[j];
    }
    const Tensor v = normalized(sum);
    std::copy(v.values().begin(), v.values().end(), out.descriptors.data() + i * d);
  }
  return out;
}

RankedList max_over_queries(const RetrievalIndex& index, const std::vector<Tensor>& queries,
                            std::size_t topk) {
  if (queries.empty()) throw std::invalid_argument("max_over_queries: no query given");
  std::vector<double> best = score_all(index, queries.front());
  for (std::size_t q = 1; q < queries.size(); ++q) {
    const auto s = score_all(index, queries[q]);
    for (std::size_t i = 0; i < best.size(); ++i) best[i] = std::max(best[i], s[i]);
  }
  return rank_scores(index, best, topk);
}

std::vector<Image> rotation_variants(const Image& image) {
  return {image, rotate_quarter_turns(image, 1), rotate_quarter_turns(image, 3)};
}

RankedList rotation_search(const RetrievalIndex& index, const Image& query, const RmacModel& model,
                           std::span<const std::size_t> scales, std::size_t topk) {
  std::vector<Tensor> descs;
  for (const Image& v : rotation_variants(query)) descs.push_back(multires_descriptor(v, model, scales));
  return max_over_queries(index, descs, topk);
}

std::string encode_descriptor_store(const RetrievalIndex& index, bool f32) {
  BinaryWriter w;
  w.magic("IRDS");
  w.u32(kDescriptorStoreVersion);
  w.u64(index.size());
  w.u32(static_cast<std::uint32_t>(index.dim()));
  w.u32((f32 ? 1U : 0U) | (index.augmented ? 2U : 0U));
  for (std::size_t i = 0; i < index.descriptors.size(); ++i) {
    if (f32) {
      w.f32(static_cast<float>(index.descriptors[i]));
    } else {
      w.f64(index.descriptors[i]);
    }
  }
  for (const auto& id : index.ids) w.str(id);
  return w.buffer();
}

RetrievalIndex decode_descriptor_store(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("IRDS");
  r.expect_version(kDescriptorStoreVersion);
  const std::uint64_t count = r.u64();
  const std::uint32_t dim = r.u32();
  const std::uint32_t flags = r.u32();
  if (flags & ~3U) throw FormatError(source + ": unknown flag bits " + std::to_string(flags));
  const bool f32 = flags & 1U;
  const std::size_t width = f32 ? 4 : 8;
  if (count != 0 && (dim == 0 || r.remaining() / width / dim < count)) {
    throw FormatError(source + ": truncated descriptor block");
  }
  std::vector<Tensor> rows(count, Tensor({dim}));
  for (auto& row : rows) {
    for (double& v : row.values()) v = f32 ? static_cast<double>(r.f32()) : r.f64();
  }
  std::vector<std::string> ids(count);
  for (auto& id : ids) id = r.str();
  r.expect_end();
  try {
    return make_index(rows, std::move(ids), flags & 2U, f32 ? 1e-5 : kUnitNormTolerance);
  } catch (const std::invalid_argument& e) {
    throw FormatError(source + ": " + e.what());
  }
}

void save_descriptor_store(const std::filesystem::path& path, const RetrievalIndex& index, bool f32) {
  write_file_atomic(path, encode_descriptor_store(index, f32));
}

RetrievalIndex load_descriptor_store(const std::filesystem::path& path) {
  return decode_descriptor_store(read_file(path), path.string());
}

std::string format_ranked_list(const std::string& query_id, const RankedList& list) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t r = 0; r < list.size(); ++r) {
    out << query_id << '\t' << r + 1 << '\t' << list[r].id << '\t' << list[r].score << '\n';
  }
  return out.str();
}

}  // namespace deepir
