#include "deepir/cleaner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "deepir/binary_io.hpp"
#include "json.hpp"

namespace deepir {

using nlohmann::json;

Affine affine_compose(const Affine& o, const Affine& i) {
  return {o[0] * i[0] + o[1] * i[3],        o[0] * i[1] + o[1] * i[4],
          o[0] * i[2] + o[1] * i[5] + o[2], o[3] * i[0] + o[4] * i[3],
          o[3] * i[1] + o[4] * i[4],        o[3] * i[2] + o[4] * i[5] + o[5]};
}

Affine affine_inverse(const Affine& a) {
  const double det = a[0] * a[4] - a[1] * a[3];
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw std::domain_error("affine transform is not invertible");
  }
  const double i0 = a[4] / det, i1 = -a[1] / det, i3 = -a[3] / det, i4 = a[0] / det;
  return {i0, i1, -(i0 * a[2] + i1 * a[5]), i3, i4, -(i3 * a[2] + i4 * a[5])};
}

std::array<double, 2> affine_apply(const Affine& a, double x, double y) {
  return {a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5]};
}

std::string match_record_to_json(const MatchRecord& r) {
  json j{{"i", r.i},
         {"j", r.j},
         {"score", r.score},
         {"affine", r.affine},
         {"box_i", {r.box_i.x0, r.box_i.y0, r.box_i.x1, r.box_i.y1}},
         {"box_j", {r.box_j.x0, r.box_j.y0, r.box_j.x1, r.box_j.y1}}};
  return j.dump();
}

MatchRecord match_record_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    MatchRecord r;
    r.i = j.at("i").get<std::string>();
    r.j = j.at("j").get<std::string>();
    r.score = j.at("score").get<double>();
    r.affine = j.at("affine").get<Affine>();
    const auto bi = j.at("box_i").get<std::array<double, 4>>();
    const auto bj = j.at("box_j").get<std::array<double, 4>>();
    r.box_i = {bi[0], bi[1], bi[2], bi[3]};
    r.box_j = {bj[0], bj[1], bj[2], bj[3]};
    if (!(r.score >= 0.0)) throw FormatError("match record: negative score");
    for (double v : r.affine) {
      if (!std::isfinite(v)) throw FormatError("match record: non-finite affine");
    }
    if (!r.box_i.well_formed() || !r.box_j.well_formed()) {
      throw FormatError("match record: malformed keypoint box");
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("match record: ") + e.what());
  }
}

std::vector<MatchRecord> read_match_records(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<MatchRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(match_record_from_json(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_match_records(const std::filesystem::path& path, const std::vector<MatchRecord>& records) {
  std::string out;
  for (const auto& r : records) out += match_record_to_json(r) + "\n";
  write_file_atomic(path, out);
}

BBox transform_box(const Affine& a, const BBox& b) {
  const std::array<Point2, 4> corners{{{b.x0, b.y0}, {b.x1, b.y0}, {b.x0, b.y1}, {b.x1, b.y1}}};
  BBox out{INFINITY, INFINITY, -INFINITY, -INFINITY};
  for (const auto& c : corners) {
    const auto p = affine_apply(a, c[0], c[1]);
    out.x0 = std::min(out.x0, p[0]);
    out.y0 = std::min(out.y0, p[1]);
    out.x1 = std::max(out.x1, p[0]);
    out.y1 = std::max(out.y1, p[1]);
  }
  return out;
}

BBox transform_box_centre(const Affine& a, const BBox& b) {
  const auto c = affine_apply(a, 0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1));
  const double hw = 0.5 * (b.x1 - b.x0) * std::hypot(a[0], a[3]);
  const double hh = 0.5 * (b.y1 - b.y0) * std::hypot(a[1], a[4]);
  return {c[0] - hw, c[1] - hh, c[0] + hw, c[1] + hh};
}

BoxProposal parse_box_proposal(const std::string& name) {
  if (name == "centre_scale") return BoxProposal::centre_scale;
  if (name == "corners") return BoxProposal::corners;
  throw std::invalid_argument("unknown box proposal '" + name + "' (centre_scale|corners)");
}

MatchGraph build_match_graph(std::map<std::string, int> labels,
                             const std::vector<MatchRecord>& records, std::size_t* dropped) {
  MatchGraph g;
  g.labels = std::move(labels);
  std::size_t n_dropped = 0;
  for (const auto& r : records) {
    const auto a = g.labels.find(r.i), b = g.labels.find(r.j);
    if (a == g.labels.end() || b == g.labels.end() || a->second != b->second || r.i == r.j) {
      ++n_dropped;
      continue;
    }
    g.edges.push_back(r);
  }
  if (dropped) *dropped = n_dropped;
  return g;
}

namespace {

struct UnionFind {
  std::vector<std::size_t> parent, rank;
  explicit UnionFind(std::size_t n) : parent(n), rank(n, 0) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank[a] < rank[b]) std::swap(a, b);
    parent[b] = a;
    if (rank[a] == rank[b]) ++rank[a];
  }
};

}  // namespace

std::vector<Component> prune_and_components(const MatchGraph& graph, double threshold) {
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  for (const auto& [id, label] : graph.labels) {
    index[id] = ids.size();
    ids.push_back(id);
  }
  UnionFind uf(ids.size());
  for (const auto& e : graph.edges) {
    if (e.score < threshold) continue;
    const auto a = index.find(e.i), b = index.find(e.j);
    if (a == index.end() || b == index.end()) continue;
    uf.unite(a->second, b->second);
  }
  std::map<std::size_t, Component> by_root;
  for (std::size_t k = 0; k < ids.size(); ++k) by_root[uf.find(k)].push_back(ids[k]);
  std::vector<Component> out;
  for (auto& [root, c] : by_root) out.push_back(std::move(c));  // ids already ascending
  std::sort(out.begin(), out.end(), [](const Component& a, const Component& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.front() < b.front();
  });
  return out;
}

std::set<std::string> retain_largest(const std::vector<Component>& components) {
  if (components.empty()) return {};
  return {components.front().begin(), components.front().end()};
}

double median_objective(const std::vector<Point2>& points, const Point2& x) {
  double f = 0.0;
  for (const auto& p : points) f += std::hypot(x[0] - p[0], x[1] - p[1]);
  return f;
}

namespace {

struct WeightedPoint {
  Point2 p;
  double w;
};

double weighted_objective(const std::vector<WeightedPoint>& pts, const Point2& x) {
  double f = 0.0;
  for (const auto& q : pts) f += q.w * std::hypot(x[0] - q.p[0], x[1] - q.p[1]);
  return f;
}

// Gradient norm of the objective without point k, evaluated at point k.
// Point k is optimal when this does not exceed its own weight.
Point2 gradient_without(const std::vector<WeightedPoint>& pts, std::size_t k) {
  Point2 g{0.0, 0.0};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i == k) continue;
    const double dx = pts[k].p[0] - pts[i].p[0], dy = pts[k].p[1] - pts[i].p[1];
    const double d = std::hypot(dx, dy);
    g[0] += pts[i].w * dx / d;
    g[1] += pts[i].w * dy / d;
  }
  return g;
}

bool optimal_at(const std::vector<WeightedPoint>& pts, std::size_t k) {
  const Point2 g = gradient_without(pts, k);
  return std::hypot(g[0], g[1]) <= pts[k].w;
}

}  // namespace

Point2 geometric_median(const std::vector<Point2>& points, const MedianOptions& options,
                        std::vector<double>* objective) {
  if (points.empty()) throw std::invalid_argument("geometric_median: no points");
  std::vector<Point2> sorted = points;
  std::sort(sorted.begin(), sorted.end());
  std::vector<WeightedPoint> pts;
  for (const auto& p : sorted) {
    if (!pts.empty() && pts.back().p == p) {
      pts.back().w += 1.0;
    } else {
      pts.push_back({p, 1.0});
    }
  }
  auto record = [&](const Point2& x) {
    if (objective) objective->push_back(weighted_objective(pts, x));
  };

  Point2 x{0.0, 0.0};
  for (const auto& q : pts) {
    x[0] += q.w * q.p[0];
    x[1] += q.w * q.p[1];
  }
  x[0] /= static_cast<double>(points.size());
  x[1] /= static_cast<double>(points.size());
  record(x);
  if (pts.size() == 1) return pts.front().p;

  for (std::size_t it = 0; it < options.max_iter; ++it) {
    std::size_t nearest = 0;
    double nearest_d = INFINITY;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double d = std::hypot(x[0] - pts[k].p[0], x[1] - pts[k].p[1]);
      if (d < nearest_d) {
        nearest_d = d;
        nearest = k;
      }
    }
    // Weiszfeld converges only sublinearly onto a data point, so test the
    // closest one directly. On a tie (e.g. the midpoint of two points) the
    // current iterate is kept; the margin absorbs round-off.
    const double fx = weighted_objective(pts, x);
    if (optimal_at(pts, nearest) && weighted_objective(pts, pts[nearest].p) < fx - 1e-12 * fx) {
      if (nearest_d > 0.0) record(pts[nearest].p);
      return pts[nearest].p;
    }

    Point2 next;
    double num0 = 0.0, num1 = 0.0, den = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double d = std::hypot(x[0] - pts[k].p[0], x[1] - pts[k].p[1]);
      if (d == 0.0) continue;
      num0 += pts[k].w * pts[k].p[0] / d;
      num1 += pts[k].w * pts[k].p[1] / d;
      den += pts[k].w / d;
    }
    const Point2 t{num0 / den, num1 / den};
    if (nearest_d == 0.0) {
      // Sitting on a non-optimal input point: descent step away from it.
      const Point2 g = gradient_without(pts, nearest);
      const double r = std::hypot(g[0], g[1]);
      const double s = std::min(1.0, pts[nearest].w / r);
      next = {(1.0 - s) * t[0] + s * x[0], (1.0 - s) * t[1] + s * x[1]};
    } else {
      next = t;
    }
    // Once round-off dominates, a step no longer lowers the objective.
    if (weighted_objective(pts, next) >= fx) break;
    const double step = std::hypot(next[0] - x[0], next[1] - x[1]);
    x = next;
    record(x);
    if (step < options.tol) break;
  }
  return x;
}

BBox median_box(const std::vector<BBox>& boxes, const MedianOptions& options) {
  if (boxes.empty()) throw std::invalid_argument("median_box: no boxes");
  std::vector<Point2> tl, br;
  for (const auto& b : boxes) {
    tl.push_back({b.x0, b.y0});
    br.push_back({b.x1, b.y1});
  }
  const Point2 a = geometric_median(tl, options), c = geometric_median(br, options);
  return {a[0], a[1], c[0], c[1]};
}

BBox initial_bbox(const std::string& node, const std::vector<MatchRecord>& incident) {
  std::vector<BBox> rects;
  for (const auto& r : incident) {
    if (r.i == node) rects.push_back(r.box_i);
    if (r.j == node) rects.push_back(r.box_j);
  }
  if (rects.empty()) throw std::invalid_argument("initial_bbox: no record touches " + node);
  return median_box(rects);
}

DiffusionResult diffuse_bboxes(const MatchGraph& graph, std::map<std::string, BBox> boxes,
                               const DiffusionConfig& cfg) {
  if (!(cfg.alpha > 0.0 && cfg.alpha <= 1.0)) {
    throw std::invalid_argument("diffuse_bboxes: alpha must be in (0, 1]");
  }
  struct Directed {
    std::string from, to;
    Affine a;
  };
  std::vector<Directed> directed;
  for (const auto& e : graph.edges) {
    if (!boxes.contains(e.i) || !boxes.contains(e.j)) continue;
    directed.push_back({e.i, e.j, e.affine});
    try {
      directed.push_back({e.j, e.i, affine_inverse(e.affine)});
    } catch (const std::domain_error&) {
      spdlog::warn("diffuse_bboxes: affine {} -> {} is singular; reverse direction skipped", e.i, e.j);
    }
  }

  DiffusionResult result;
  for (std::size_t sweep = 0; sweep < cfg.max_iter; ++sweep) {
    std::map<std::string, std::vector<BBox>> proposals;
    for (const auto& d : directed) {
      const BBox& from = boxes.at(d.from);
      const BBox p = cfg.proposal == BoxProposal::corners ? transform_box(d.a, from)
                                                          : transform_box_centre(d.a, from);
      if (p.well_formed() && std::isfinite(p.x0 + p.y0 + p.x1 + p.y1)) proposals[d.to].push_back(p);
    }
    std::map<std::string, BBox> next = boxes;
    double moved = 0.0;
    for (const auto& [id, props] : proposals) {
      const BBox m = median_box(props);
      if (!m.well_formed()) continue;
      const BBox& b = boxes.at(id);
      const double keep = 1.0 - cfg.alpha;
      const BBox nb{keep * b.x0 + cfg.alpha * m.x0, keep * b.y0 + cfg.alpha * m.y0,
                    keep * b.x1 + cfg.alpha * m.x1, keep * b.y1 + cfg.alpha * m.y1};
      moved = std::max({moved, std::abs(nb.x0 - b.x0), std::abs(nb.y0 - b.y0),
                        std::abs(nb.x1 - b.x1), std::abs(nb.y1 - b.y1)});
      next[id] = nb;
    }
    boxes = std::move(next);
    result.max_displacement.push_back(moved);
    result.sweeps = sweep + 1;
    if (moved < cfg.tol) {
      result.converged = true;
      break;
    }
  }
  result.boxes = std::move(boxes);
  return result;
}

CleanResult clean_collection(const Manifest& manifest, const std::vector<MatchRecord>& records,
                             const CleanConfig& cfg, const std::string& split) {
  std::map<std::string, int> labels;
  for (const auto* e : manifest.select(split)) labels[e->id] = e->label;
  CleanResult result;
  const MatchGraph all = build_match_graph(labels, records, &result.dropped_records);
  if (result.dropped_records > 0) {
    spdlog::warn("clean: {} match records ignored (unknown id or across classes)",
                 result.dropped_records);
  }

  std::map<int, MatchGraph> per_class;
  for (const auto& [id, label] : labels) per_class[label].labels[id] = label;
  for (const auto& e : all.edges) per_class[all.labels.at(e.i)].edges.push_back(e);
  std::vector<const MatchGraph*> graphs;
  for (const auto& [label, g] : per_class) {
    ClassCleaning c;
    c.label = label;
    c.input_images = g.labels.size();
    result.classes.push_back(std::move(c));
    graphs.push_back(&g);
  }

  std::vector<std::map<std::string, BBox>> class_boxes(graphs.size());
  std::vector<std::string> errors(graphs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t c = 0; c < graphs.size(); ++c) {
    try {
      const MatchGraph& g = *graphs[c];
      const auto components = prune_and_components(g, cfg.threshold);
      const auto retained = retain_largest(components);
      MatchGraph kept;
      for (const auto& id : retained) kept.labels[id] = g.labels.at(id);
      std::map<std::string, std::vector<MatchRecord>> incident;
      for (const auto& e : g.edges) {
        if (e.score < cfg.threshold || !retained.contains(e.i) || !retained.contains(e.j)) continue;
        kept.edges.push_back(e);
        incident[e.i].push_back(e);
        incident[e.j].push_back(e);
      }
      std::map<std::string, BBox> init;
      for (const auto& [id, recs] : incident) init[id] = initial_bbox(id, recs);
      auto diffused = diffuse_bboxes(kept, std::move(init), cfg.diffusion);
      result.classes[c].retained = retained;
      result.classes[c].components = components.size();
      result.classes[c].sweeps = diffused.sweeps;
      class_boxes[c] = std::move(diffused.boxes);
    } catch (const std::exception& ex) {
      errors[c] = ex.what();
    }
  }
  for (std::size_t c = 0; c < graphs.size(); ++c) {
    if (!errors[c].empty()) {
      throw std::runtime_error("clean: class " + std::to_string(result.classes[c].label) + ": " +
                               errors[c]);
    }
    result.boxes.insert(class_boxes[c].begin(), class_boxes[c].end());
  }
  return result;
}

Manifest apply_cleaning(const Manifest& manifest, const CleanResult& result,
                        const std::string& split) {
  std::set<std::string> keep;
  for (const auto& c : result.classes) keep.insert(c.retained.begin(), c.retained.end());
  Manifest out = manifest;
  out.entries.clear();
  for (const auto& e : manifest.entries) {
    if (e.split != split) {
      out.entries.push_back(e);
      continue;
    }
    if (!keep.contains(e.id)) continue;
    ManifestEntry kept = e;
    if (const auto it = result.boxes.find(e.id); it != result.boxes.end()) kept.roi = it->second;
    out.entries.push_back(std::move(kept));
  }
  return out;
}

std::string cleaning_to_json(const CleanResult& result) {
  json classes = json::object();
  for (const auto& c : result.classes) {
    classes[std::to_string(c.label)] = std::vector<std::string>(c.retained.begin(), c.retained.end());
  }
  return json{{"version", 1}, {"classes", std::move(classes)}}.dump(1) + "\n";
}

std::string boxes_to_json(const std::map<std::string, BBox>& boxes) {
  json j = json::object();
  for (const auto& [id, b] : boxes) j[id] = {b.x0, b.y0, b.x1, b.y1};
  return j.dump(1) + "\n";
}

std::map<std::string, BBox> boxes_from_json(const std::string& text) {
  try {
    std::map<std::string, BBox> out;
    const json doc = json::parse(text);
    for (const auto& [id, v] : doc.items()) {
      const auto a = v.get<std::array<double, 4>>();
      const BBox b{a[0], a[1], a[2], a[3]};
      if (!b.well_formed()) throw FormatError("boxes: malformed box for " + id);
      out[id] = b;
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("boxes: ") + e.what());
  }
}

}  // namespace deepir
