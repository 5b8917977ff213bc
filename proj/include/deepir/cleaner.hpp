#pragma once

// Cleaning of a noisy labeled collection from verified pairwise matches, and
// bounding-box estimation by diffusing keypoint boxes along the match graph.

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "deepir/dataset.hpp"

namespace deepir {

// 2x3 affine [a b tx; c d ty] mapping (x, y) to (a x + b y + tx, c x + d y + ty).
using Affine = std::array<double, 6>;

Affine affine_compose(const Affine& outer, const Affine& inner);
// Throws std::domain_error when the linear part is singular.
Affine affine_inverse(const Affine& a);
std::array<double, 2> affine_apply(const Affine& a, double x, double y);

// Axis-aligned rectangle enclosing the four transformed corners.
BBox transform_box(const Affine& a, const BBox& b);
// Box around the transformed centre with width and height scaled by the norms
// of the affine's first and second columns. Unlike transform_box, a rotation
// followed by its inverse returns the original box.
BBox transform_box_centre(const Affine& a, const BBox& b);

struct MatchRecord {
  std::string i, j;
  double score = 0.0;  // verified inliers
  Affine affine{};     // maps i coordinates to j coordinates
  BBox box_i, box_j;   // matched keypoints' enclosing rectangles
};

// {"i","j","score","affine":[a,b,tx,c,d,ty],"box_i":[x0,y0,x1,y1],"box_j":[...]}
std::string match_record_to_json(const MatchRecord& r);
// Throws FormatError on malformed JSON, negative score, non-finite affine or bad box.
MatchRecord match_record_from_json(const std::string& line);
std::vector<MatchRecord> read_match_records(const std::filesystem::path& path);
void write_match_records(const std::filesystem::path& path, const std::vector<MatchRecord>& records);

struct MatchGraph {
  std::map<std::string, int> labels;  // node -> class
  std::vector<MatchRecord> edges;
};

// Nodes are `labels`; records touching unknown ids or joining two classes are
// dropped and counted in `dropped`.
MatchGraph build_match_graph(std::map<std::string, int> labels,
                             const std::vector<MatchRecord>& records, std::size_t* dropped = nullptr);

using Component = std::vector<std::string>;  // sorted ids

// Drops edges scoring below `threshold` and returns the connected components,
// largest first, equal sizes ordered by smallest id.
std::vector<Component> prune_and_components(const MatchGraph& graph, double threshold);

std::set<std::string> retain_largest(const std::vector<Component>& components);

using Point2 = std::array<double, 2>;

struct MedianOptions {
  double tol = 1e-9;
  std::size_t max_iter = 1000;
};

// Weiszfeld iterations from the centroid. An iterate that reaches an input
// point stops there when that point is optimal and otherwise takes the
// descent step away from it. `objective`, when given, receives sum |x - p_i|
// at the start and after each accepted step; a step that would not lower it
// ends the iteration.
Point2 geometric_median(const std::vector<Point2>& points, const MedianOptions& options = {},
                        std::vector<double>* objective = nullptr);

double median_objective(const std::vector<Point2>& points, const Point2& x);

// Geometric medians of the top-left and the bottom-right corners.
BBox median_box(const std::vector<BBox>& boxes, const MedianOptions& options = {});

// Keypoint rectangles `node` has in its incident records, merged by median_box.
// Throws std::invalid_argument when no record touches `node`.
BBox initial_bbox(const std::string& node, const std::vector<MatchRecord>& incident);

enum class BoxProposal { centre_scale, corners };

BoxProposal parse_box_proposal(const std::string& name);

struct DiffusionConfig {
  double alpha = 0.1;
  // corners: transform_box. Around a cycle of rotated edges it inflates the
  // boxes at every hop and diverges.
  BoxProposal proposal = BoxProposal::centre_scale;
  double tol = 1e-3;  // pixels
  std::size_t max_iter = 200;
};

struct DiffusionResult {
  std::map<std::string, BBox> boxes;
  std::vector<double> max_displacement;  // per sweep
  std::size_t sweeps = 0;
  bool converged = false;
};

// Synchronous sweeps: every edge proposes A B_i for j and A^-1 B_j for i, each
// node merges its proposals with median_box and moves to (1 - alpha) B + alpha
// proposal. Nodes without a box are ignored; singular reverse affines are skipped.
DiffusionResult diffuse_bboxes(const MatchGraph& graph, std::map<std::string, BBox> boxes,
                               const DiffusionConfig& cfg = {});

struct CleanConfig {
  double threshold = 10.0;
  DiffusionConfig diffusion;
};

struct ClassCleaning {
  int label = 0;
  std::size_t input_images = 0;
  std::set<std::string> retained;
  std::size_t components = 0;
  std::size_t sweeps = 0;
};

struct CleanResult {
  std::vector<ClassCleaning> classes;  // ascending label
  std::map<std::string, BBox> boxes;
  std::size_t dropped_records = 0;
};

// Cleans every class of `split` independently.
CleanResult clean_collection(const Manifest& manifest, const std::vector<MatchRecord>& records,
                             const CleanConfig& cfg, const std::string& split = "train");

// Train entries outside the retained sets are removed and retained ones get
// their estimated box as ROI; other splits are unchanged.
Manifest apply_cleaning(const Manifest& manifest, const CleanResult& result,
                        const std::string& split = "train");

// {"version": 1, "classes": {"<label>": [ids]}}
std::string cleaning_to_json(const CleanResult& result);
// {"<id>": [x0, y0, x1, y1]}
std::string boxes_to_json(const std::map<std::string, BBox>& boxes);
std::map<std::string, BBox> boxes_from_json(const std::string& text);

}  // namespace deepir
