#pragma once

// Retrieval metrics and the evaluation protocol over a manifest.

#include <map>
#include <optional>
#include <span>
#include <set>
#include <string>
#include <vector>

#include "deepir/compress.hpp"
#include "deepir/dataset.hpp"
#include "deepir/engine.hpp"

namespace deepir {

// Precision at each positive's rank after excising ignored ids. Returns
// (recall, precision) pairs, one per retrieved positive.
std::vector<std::pair<double, double>> ap_curve(const std::vector<std::string>& ranked,
                                                const std::set<std::string>& positives,
                                                const std::set<std::string>& ignores);

// Mean over all positives of the precision at its rank; positives never
// retrieved count 0. nullopt for an empty positive set.
std::optional<double> average_precision(const std::vector<std::string>& ranked,
                                        const std::set<std::string>& positives,
                                        const std::set<std::string>& ignores = {});

// Skipped queries (nullopt) are left out; 0 when nothing is left.
double mean_ap(const std::vector<std::optional<double>>& aps);

// Positives among the first four results.
double recall_at_4(const std::vector<std::string>& ranked, const std::set<std::string>& positives);

// Externally supplied pooling regions per image id, in pixels of the image as
// it is described (queries after ROI cropping). Text form: one region per line,
// "image_id<TAB>x0 y0 x1 y1"; blank lines and lines starting with '#' are skipped.
using RegionList = std::map<std::string, std::vector<BBox>>;
RegionList parse_region_list(const std::string& text);

// Pixel boxes of an image of size height x width mapped onto the feature map
// of the same image resized to resized_h x resized_w. Boxes are clamped to the
// map and widened to at least one cell.
std::vector<Region> regions_for_scale(const BackboneParams& backbone, const std::vector<BBox>& boxes,
                                      std::size_t height, std::size_t width, std::size_t resized_h,
                                      std::size_t resized_w);

// multires_descriptor pooling `boxes` instead of the rigid grid at every scale.
Tensor multires_region_descriptor(const Image& image, const RmacModel& model,
                                  std::span<const std::size_t> scales, const std::vector<BBox>& boxes);

struct ExtractOptions {
  std::vector<std::size_t> query_scales{128};
  std::vector<std::size_t> db_scales{128};
  bool rotations = false;  // also describe queries rotated by 90 and 270 degrees
  std::string split = "test";
  const RegionList* regions = nullptr;  // rotated query variants keep the rigid grid
};

struct BenchmarkQuery {
  std::string id;
  std::vector<Tensor> descriptors;  // first is upright, then rotations when requested
  std::set<std::string> positives;
  std::set<std::string> ignores;
};

// Descriptors of every database image and query of one split.
struct ExtractedBenchmark {
  RetrievalIndex db;
  std::vector<BenchmarkQuery> queries;
  Protocol protocol;
};

// Queries are cropped to their ROI when the protocol asks for it.
ExtractedBenchmark extract_benchmark(const Manifest& manifest, const RmacModel& model,
                                     const ExtractOptions& options);

struct RankOptions {
  std::size_t k_qe = 0;
  std::size_t k_dba = 0;
  const PqCodebook* pq = nullptr;  // rank with ADC over PQ codes instead of raw descriptors
  std::size_t keep = 0;            // ranked-list length kept in the report, 0 = all
};

struct QueryReport {
  std::string id;
  std::optional<double> ap;
  double recall4 = 0.0;
  RankedList ranked;
  std::vector<std::pair<double, double>> curve;
};

struct EvalReport {
  std::vector<QueryReport> queries;
  double map = 0.0;
  double mean_recall4 = 0.0;
  std::size_t skipped = 0;
  RankOptions options;
};

// DBA on the database, then per query QE and ranking. Throws
// std::invalid_argument for PQ combined with DBA.
EvalReport evaluate(const ExtractedBenchmark& bench, const RankOptions& options);

EvalReport run_protocol(const Manifest& manifest, const RmacModel& model,
                        const ExtractOptions& extract, const RankOptions& rank);

// {"map", "mean_recall_at_4", "skipped", "k_qe", "k_dba", "pq_m", "queries": [{"id", "ap", "recall_at_4"}]}
std::string report_to_json(const EvalReport& report);
// "recall\tprecision" per line.
std::string format_ap_curve(const std::vector<std::pair<double, double>>& curve);

struct GridCell {
  std::size_t k_dba = 0, k_qe = 0;
  double map = 0.0;
};

std::vector<GridCell> qe_dba_grid(const ExtractedBenchmark& bench, std::size_t max_k_qe,
                                  const std::vector<std::size_t>& k_dba_values);
// "k_dba\tk_qe\tmap" per line with a header row.
std::string format_grid(const std::vector<GridCell>& grid);

}  // namespace deepir
