#include "deepir/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "json.hpp"

#include "deepir/binary_io.hpp"

namespace deepir {

std::vector<std::pair<double, double>> ap_curve(const std::vector<std::string>& ranked,
                                                const std::set<std::string>& positives,
                                                const std::set<std::string>& ignores) {
  std::vector<std::pair<double, double>> curve;
  if (positives.empty()) return curve;
  const double total = static_cast<double>(positives.size());
  std::size_t rank = 0, hits = 0;
  for (const auto& id : ranked) {
    if (ignores.contains(id)) continue;
    ++rank;
    if (positives.contains(id)) {
      ++hits;
      curve.emplace_back(static_cast<double>(hits) / total,
                         static_cast<double>(hits) / static_cast<double>(rank));
    }
  }
  return curve;
}

std::optional<double> average_precision(const std::vector<std::string>& ranked,
                                        const std::set<std::string>& positives,
                                        const std::set<std::string>& ignores) {
  if (positives.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& [recall, precision] : ap_curve(ranked, positives, ignores)) sum += precision;
  return sum / static_cast<double>(positives.size());
}

double mean_ap(const std::vector<std::optional<double>>& aps) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ap : aps) {
    if (!ap) continue;
    sum += *ap;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double recall_at_4(const std::vector<std::string>& ranked, const std::set<std::string>& positives) {
  double n = 0.0;
  for (std::size_t i = 0; i < ranked.size() && i < 4; ++i) {
    if (positives.contains(ranked[i])) n += 1.0;
  }
  return n;
}

RegionList parse_region_list(const std::string& text) {
  RegionList out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const std::size_t tab = line.find('\t');
    std::istringstream fields(tab == std::string::npos ? std::string() : line.substr(tab + 1));
    BBox b;
    std::string rest;
    if (tab == 0 || tab == std::string::npos || !(fields >> b.x0 >> b.y0 >> b.x1 >> b.y1) ||
        (fields >> rest) || !b.well_formed() || b.x0 < 0 || b.y0 < 0) {
      throw FormatError("region list line " + std::to_string(lineno) + ": expected \"id<TAB>x0 y0 x1 y1\"");
    }
    out[line.substr(0, tab)].push_back(b);
  }
  return out;
}

std::vector<Region> regions_for_scale(const BackboneParams& backbone, const std::vector<BBox>& boxes,
                                      std::size_t height, std::size_t width, std::size_t resized_h,
                                      std::size_t resized_w) {
  std::size_t map_h = resized_h, map_w = resized_w;
  for (const auto& layer : backbone.layers) {
    const std::size_t k = layer.weight.dim(2);
    if (map_h + 2 * layer.pad < k || map_w + 2 * layer.pad < k) {
      throw DimensionError("regions_for_scale: image too small for the backbone");
    }
    map_h = (map_h + 2 * layer.pad - k) / layer.stride + 1;
    map_w = (map_w + 2 * layer.pad - k) / layer.stride + 1;
  }
  const double fy = static_cast<double>(map_h) / static_cast<double>(height);
  const double fx = static_cast<double>(map_w) / static_cast<double>(width);
  auto cells = [](double lo, double hi, std::size_t n) {
    auto a = static_cast<std::size_t>(std::clamp(std::floor(lo), 0.0, static_cast<double>(n - 1)));
    auto b = static_cast<std::size_t>(std::clamp(std::ceil(hi), 0.0, static_cast<double>(n)));
    return std::pair{a, std::max(b, a + 1)};
  };
  std::vector<Region> out;
  for (const auto& box : boxes) {
    const auto [x0, x1] = cells(box.x0 * fx, box.x1 * fx, map_w);
    const auto [y0, y1] = cells(box.y0 * fy, box.y1 * fy, map_h);
    out.push_back({x0, y0, x1, y1});
  }
  return out;
}

Tensor multires_region_descriptor(const Image& image, const RmacModel& model,
                                  std::span<const std::size_t> scales, const std::vector<BBox>& boxes) {
  if (scales.empty()) throw std::invalid_argument("multires_region_descriptor: no scales given");
  if (boxes.empty()) throw std::invalid_argument("multires_region_descriptor: empty region list");
  std::vector<Tensor> per_scale;
  for (std::size_t scale : scales) {
    const Image resized = resize_larger_side(image, scale);
    const auto regions = regions_for_scale(model.backbone, boxes, image.height(), image.width(),
                                           resized.height(), resized.width());
    per_scale.push_back(describe(model, resized, &regions));
  }
  return sum_and_normalize(per_scale);
}

ExtractedBenchmark extract_benchmark(const Manifest& manifest, const RmacModel& model,
                                     const ExtractOptions& options) {
  const auto entries = manifest.select(options.split);
  ExtractedBenchmark bench;
  bench.protocol = manifest.protocol;

  std::vector<const ManifestEntry*> query_entries;
  for (const auto* e : entries) {
    if (e->query) query_entries.push_back(e);
  }
  std::vector<Tensor> db(entries.size());
  bench.queries.resize(query_entries.size());
  std::vector<std::string> errors(entries.size() + query_entries.size());
  auto describe_entry = [&](const std::string& id, const Image& img, const std::vector<std::size_t>& scales) {
    if (options.regions) {
      const auto it = options.regions->find(id);
      if (it != options.regions->end()) return multires_region_descriptor(img, model, scales, it->second);
    }
    return multires_descriptor(img, model, scales);
  };

  // Slots are filled independently; any failure is rethrown in manifest order below.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < entries.size() + query_entries.size(); ++i) {
    try {
      if (i < entries.size()) {
        db[i] = describe_entry(entries[i]->id, load_image(manifest.image_path(*entries[i])),
                               options.db_scales);
        continue;
      }
      const ManifestEntry& e = *query_entries[i - entries.size()];
      Image img = load_image(manifest.image_path(e));
      if (manifest.protocol.crop_query && e.roi) {
        const auto& r = *e.roi;
        img = crop(img, static_cast<std::size_t>(std::max(0.0, std::floor(r.x0))),
                   static_cast<std::size_t>(std::max(0.0, std::floor(r.y0))),
                   static_cast<std::size_t>(std::ceil(r.x1)), static_cast<std::size_t>(std::ceil(r.y1)));
      }
      BenchmarkQuery q{e.id, {}, {e.positives.begin(), e.positives.end()},
                       {e.ignores.begin(), e.ignores.end()}};
      q.descriptors.push_back(describe_entry(e.id, img, options.query_scales));
      if (options.rotations) {
        const auto variants = rotation_variants(img);
        for (std::size_t v = 1; v < variants.size(); ++v) {
          q.descriptors.push_back(multires_descriptor(variants[v], model, options.query_scales));
        }
      }
      bench.queries[i - entries.size()] = std::move(q);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  }
  for (const auto& err : errors) {
    if (!err.empty()) throw std::runtime_error("extract_benchmark: " + err);
  }
  std::vector<std::string> ids;
  for (const auto* e : entries) ids.push_back(e->id);
  bench.db = build_index(db, std::move(ids));
  return bench;
}

namespace {

RankedList rank_rows(const RetrievalIndex& db, const std::vector<double>& scores,
                     const std::string* exclude) {
  RankedList out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (exclude && db.ids[i] == *exclude) continue;
    out.push_back({db.ids[i], scores[i]});
  }
  std::sort(out.begin(), out.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return out;
}

}  // namespace

EvalReport evaluate(const ExtractedBenchmark& bench, const RankOptions& options) {
  if (options.pq && options.k_dba > 0) {
    throw std::invalid_argument("evaluate: DBA cannot be combined with PQ codes");
  }
  const RetrievalIndex db = options.k_dba > 0 ? dba_augment(bench.db, options.k_dba) : bench.db;
  PqCodes codes;
  if (options.pq) codes = pq_encode_index(db, *options.pq);
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < db.size(); ++i) row_of[db.ids[i]] = i;

  auto scores_for = [&](const Tensor& q) {
    if (options.pq) return pq_adc_scores(codes, *options.pq, q);
    std::vector<double> s(db.size());
    if (db.size() > 0 && q.size() != db.dim()) {
      throw DimensionError("evaluate: query dimension " + std::to_string(q.size()) +
                           " differs from database dimension " + std::to_string(db.dim()));
    }
    for (std::size_t i = 0; i < db.size(); ++i) s[i] = dot(db.row(i), q.values());
    return s;
  };
  auto max_scores = [&](const std::vector<Tensor>& qs) {
    std::vector<double> best = scores_for(qs.front());
    for (std::size_t k = 1; k < qs.size(); ++k) {
      const auto s = scores_for(qs[k]);
      for (std::size_t i = 0; i < best.size(); ++i) best[i] = std::max(best[i], s[i]);
    }
    return best;
  };

  EvalReport report;
  report.options = options;
  report.queries.resize(bench.queries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t qi = 0; qi < bench.queries.size(); ++qi) {
    const BenchmarkQuery& q = bench.queries[qi];
    const std::string* exclude = bench.protocol.remove_query ? &q.id : nullptr;
    std::vector<Tensor> variants = q.descriptors;
    RankedList ranked = rank_rows(db, max_scores(variants), exclude);
    if (options.k_qe > 0) {
      Tensor sum = variants.front();
      const std::size_t k = std::min(options.k_qe, ranked.size());
      for (std::size_t r = 0; r < k; ++r) {
        const std::size_t row = row_of.at(ranked[r].id);
        const Tensor nb = options.pq ? pq_decode(codes.code(row), *options.pq)
                                     : Tensor({db.dim()}, {db.row(row).begin(), db.row(row).end()});
        sum += nb;
      }
      Tensor expanded = Tensor::zeros_like(sum);
      detail::l2_normalize_forward(sum.values(), expanded.values(), kNormEps);
      variants.front() = std::move(expanded);
      ranked = rank_rows(db, max_scores(variants), exclude);
    }
    QueryReport qr;
    qr.id = q.id;
    std::vector<std::string> ids;
    ids.reserve(ranked.size());
    for (const auto& s : ranked) ids.push_back(s.id);
    qr.curve = ap_curve(ids, q.positives, q.ignores);
    qr.ap = average_precision(ids, q.positives, q.ignores);
    qr.recall4 = recall_at_4(ids, q.positives);
    if (options.keep > 0 && ranked.size() > options.keep) ranked.resize(options.keep);
    qr.ranked = std::move(ranked);
    report.queries[qi] = std::move(qr);
  }

  std::vector<std::optional<double>> aps;
  double r4 = 0.0;
  for (const auto& q : report.queries) {
    if (!q.ap) {
      spdlog::warn("query {} has no positives; skipped", q.id);
      ++report.skipped;
    }
    aps.push_back(q.ap);
    r4 += q.recall4;
  }
  report.map = mean_ap(aps);
  report.mean_recall4 = report.queries.empty() ? 0.0 : r4 / static_cast<double>(report.queries.size());
  return report;
}

EvalReport run_protocol(const Manifest& manifest, const RmacModel& model,
                        const ExtractOptions& extract, const RankOptions& rank) {
  if (rank.pq && rank.k_dba > 0) {
    throw std::invalid_argument("run_protocol: DBA cannot be combined with PQ codes");
  }
  return evaluate(extract_benchmark(manifest, model, extract), rank);
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json queries = nlohmann::json::array();
  for (const auto& q : report.queries) {
    nlohmann::json j{{"id", q.id}, {"recall_at_4", q.recall4}};
    j["ap"] = q.ap ? nlohmann::json(*q.ap) : nlohmann::json(nullptr);
    queries.push_back(std::move(j));
  }
  nlohmann::json doc{{"version", 1},
                     {"map", report.map},
                     {"mean_recall_at_4", report.mean_recall4},
                     {"skipped", report.skipped},
                     {"k_qe", report.options.k_qe},
                     {"k_dba", report.options.k_dba},
                     {"pq_m", report.options.pq ? report.options.pq->m : 0},
                     {"queries", std::move(queries)}};
  return doc.dump(1) + "\n";
}

std::string format_ap_curve(const std::vector<std::pair<double, double>>& curve) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& [r, p] : curve) out << r << '\t' << p << '\n';
  return out.str();
}

std::vector<GridCell> qe_dba_grid(const ExtractedBenchmark& bench, std::size_t max_k_qe,
                                  const std::vector<std::size_t>& k_dba_values) {
  std::vector<GridCell> grid;
  for (std::size_t k_dba : k_dba_values) {
    ExtractedBenchmark augmented = bench;
    if (k_dba > 0) augmented.db = dba_augment(bench.db, k_dba);
    for (std::size_t k_qe = 0; k_qe <= max_k_qe; ++k_qe) {
      grid.push_back({k_dba, k_qe, evaluate(augmented, {.k_qe = k_qe}).map});
    }
  }
  return grid;
}

std::string format_grid(const std::vector<GridCell>& grid) {
  std::ostringstream out;
  out.precision(17);
  out << "k_dba\tk_qe\tmap\n";
  for (const auto& c : grid) out << c.k_dba << '\t' << c.k_qe << '\t' << c.map << '\n';
  return out.str();
}

}  // namespace deepir
