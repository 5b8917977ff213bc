#include <algorithm>
#include <cmath>
#include <random>

#include "deepir/binary_io.hpp"
#include "deepir/cleaner.hpp"
#include "deepir/synthetic.hpp"
#include "doctest.h"

using namespace deepir;

namespace {

MatchRecord edge(std::string i, std::string j, double score, Affine a = {1, 0, 0, 0, 1, 0}) {
  MatchRecord r;
  r.i = std::move(i);
  r.j = std::move(j);
  r.score = score;
  r.affine = a;
  r.box_i = {0, 0, 1, 1};
  r.box_j = {0, 0, 1, 1};
  return r;
}

MatchGraph one_class(std::initializer_list<std::string> ids, std::vector<MatchRecord> edges) {
  MatchGraph g;
  for (const auto& id : ids) g.labels[id] = 0;
  g.edges = std::move(edges);
  return g;
}

std::string node(const char* prefix, int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%s%02d", prefix, k);
  return buf;
}

// Two planted clusters (30 and 10 nodes) joined internally by a spanning chain
// plus random strong edges, and 5 weak cross edges.
MatchGraph planted_graph(std::mt19937_64& rng) {
  MatchGraph g;
  std::vector<std::string> a, b;
  for (int k = 0; k < 30; ++k) a.push_back(node("a", k));
  for (int k = 0; k < 10; ++k) b.push_back(node("b", k));
  for (const auto& id : a) g.labels[id] = 1;
  for (const auto& id : b) g.labels[id] = 1;
  std::uniform_real_distribution<double> strong(2.0, 60.0);
  auto wire = [&](const std::vector<std::string>& c, std::size_t extra) {
    std::vector<std::string> order = c;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 1; k < order.size(); ++k) g.edges.push_back(edge(order[k - 1], order[k], strong(rng)));
    std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
    for (std::size_t k = 0; k < extra; ++k) {
      const auto u = pick(rng), v = pick(rng);
      if (u != v) g.edges.push_back(edge(c[u], c[v], strong(rng)));
    }
  };
  wire(a, 40);
  wire(b, 10);
  std::uniform_int_distribution<std::size_t> pa(0, 29), pb(0, 9);
  for (int k = 0; k < 5; ++k) g.edges.push_back(edge(a[pa(rng)], b[pb(rng)], 1.0));
  return g;
}

double max_corner_error(const BBox& a, const BBox& b) {
  return std::max({std::abs(a.x0 - b.x0), std::abs(a.y0 - b.y0), std::abs(a.x1 - b.x1),
                   std::abs(a.y1 - b.y1)});
}

}  // namespace

TEST_CASE("components after pruning") {
  const MatchGraph g = one_class({"1", "2", "3", "4", "5"},
                                 {edge("1", "2", 10), edge("2", "3", 10), edge("4", "5", 10)});
  const auto c5 = prune_and_components(g, 5);
  REQUIRE(c5.size() == 2);
  CHECK(c5[0] == Component{"1", "2", "3"});
  CHECK(c5[1] == Component{"4", "5"});
  const auto c11 = prune_and_components(g, 11);
  REQUIRE(c11.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) CHECK(c11[k] == Component{std::to_string(k + 1)});
  CHECK(prune_and_components(g, 10).size() == 2);  // score equal to the threshold survives
}

TEST_CASE("planted two-cluster graph is recovered exactly and independent of edge order") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    MatchGraph g = planted_graph(rng);
    const auto comps = prune_and_components(g, 2.0);
    REQUIRE(comps.size() == 2);
    REQUIRE(comps[0].size() == 30);
    REQUIRE(comps[1].size() == 10);
    CHECK(std::all_of(comps[0].begin(), comps[0].end(), [](const auto& s) { return s[0] == 'a'; }));
    CHECK(std::all_of(comps[1].begin(), comps[1].end(), [](const auto& s) { return s[0] == 'b'; }));
    CHECK(retain_largest(comps).size() == 30);
    CHECK(prune_and_components(g, 1.0).size() == 1);

    std::shuffle(g.edges.begin(), g.edges.end(), rng);
    for (auto& e : g.edges) {
      if (rng() % 2) std::swap(e.i, e.j);
    }
    CHECK(prune_and_components(g, 2.0) == comps);
  }
}

TEST_CASE("retain_largest") {
  CHECK(retain_largest({{"1", "2", "3"}, {"4", "5"}}) == std::set<std::string>{"1", "2", "3"});
  CHECK(retain_largest({{"7", "8"}}) == std::set<std::string>{"7", "8"});
  CHECK(retain_largest({}).empty());
  const MatchGraph tie = one_class({"b", "c", "a", "d"}, {edge("c", "d", 20), edge("a", "b", 20)});
  CHECK(retain_largest(prune_and_components(tie, 10)) == std::set<std::string>{"a", "b"});
  CHECK(prune_and_components(MatchGraph{}, 1).empty());
}

TEST_CASE("match graph keeps only edges inside one class") {
  std::size_t dropped = 0;
  const auto g = build_match_graph({{"x", 0}, {"y", 0}, {"z", 1}},
                                   {edge("x", "y", 5), edge("x", "z", 5), edge("x", "w", 5)}, &dropped);
  CHECK(g.edges.size() == 1);
  CHECK(dropped == 2);
}

TEST_CASE("geometric median examples") {
  CHECK(geometric_median({{3, 4}, {3, 4}, {3, 4}}) == Point2{3, 4});
  const Point2 mid = geometric_median({{0, 0}, {4, 2}});
  CHECK(mid[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(mid[1] == doctest::Approx(1.0).epsilon(1e-12));
  const Point2 sq = geometric_median({{0, 0}, {1, 0}, {0, 1}, {1, 1}});
  CHECK(sq[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(sq[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK_THROWS_AS(geometric_median({}), std::invalid_argument);
}

TEST_CASE("geometric median is a minimizer and its objective never increases") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<Point2> pts(2 + rng() % 12);
    for (auto& p : pts) p = {n(rng), n(rng)};
    if (trial % 4 == 0) pts.push_back(pts.front());  // duplicates pull the median onto a point
    if (trial % 4 == 0) pts.push_back(pts.front());
    std::vector<double> trace;
    const Point2 x = geometric_median(pts, {}, &trace);
    for (std::size_t k = 1; k < trace.size(); ++k) CHECK(trace[k] <= trace[k - 1] + 1e-12);
    // Convex objective: no probe around x may do better.
    const double fx = median_objective(pts, x);
    for (int d = 0; d < 16; ++d) {
      const double a = d * std::numbers::pi / 8;
      for (double r : {1e-3, 1e-1, 1.0}) {
        CHECK(median_objective(pts, {x[0] + r * std::cos(a), x[1] + r * std::sin(a)}) >= fx - 1e-9);
      }
    }
  }
}

TEST_CASE("geometric median starting on a non-optimal input point moves off it") {
  // The centroid of this set is the input point (0, 0), which is not optimal.
  const std::vector<Point2> pts{{0, 0}, {-1, 0}, {1, 0}, {0, 6}, {0, 6}, {0, 6}, {0, -18}};
  std::vector<double> trace;
  const Point2 x = geometric_median(pts, {}, &trace);
  CHECK(median_objective(pts, x) < median_objective(pts, {0, 0}));
  for (std::size_t k = 1; k < trace.size(); ++k) CHECK(trace[k] <= trace[k - 1] + 1e-12);
}

TEST_CASE("initial boxes from keypoint rectangles") {
  auto rec = [](BBox bi) {
    MatchRecord r = edge("n", "m", 20);
    r.box_i = bi;
    return r;
  };
  CHECK(initial_bbox("n", {rec({1, 2, 30, 40})}) == BBox{1, 2, 30, 40});
  CHECK(initial_bbox("n", {rec({1, 2, 3, 4}), rec({1, 2, 3, 4}), rec({1, 2, 3, 4})}) == BBox{1, 2, 3, 4});

  const std::vector<MatchRecord> outlier{rec({0, 0, 10, 10}), rec({0, 0, 10, 10}), rec({0, 0, 20, 20})};
  // Oracle: brute-force minimum of the corner objective over a 0.01 px lattice.
  const std::vector<Point2> br{{10, 10}, {10, 10}, {20, 20}};
  Point2 best{0, 0};
  double best_f = INFINITY;
  for (int i = 500; i <= 2500; ++i) {
    const double t = i * 0.01;
    const double f = median_objective(br, {t, t});
    if (f < best_f) {
      best_f = f;
      best = {t, t};
    }
  }
  CHECK(best == Point2{10, 10});
  CHECK(initial_bbox("n", outlier) == BBox{0, 0, 10, 10});

  MatchRecord as_j = edge("m", "n", 20);
  as_j.box_j = {5, 5, 9, 9};
  CHECK(initial_bbox("n", {as_j}) == BBox{5, 5, 9, 9});
  CHECK_THROWS_AS(initial_bbox("z", {as_j}), std::invalid_argument);
}

TEST_CASE("affine helpers") {
  const Affine a{2, 0.5, 3, -0.25, 1.5, -1};
  const Affine id = affine_compose(a, affine_inverse(a));
  const Affine expect{1, 0, 0, 0, 1, 0};
  for (int k = 0; k < 6; ++k) CHECK(id[k] == doctest::Approx(expect[k]).epsilon(1e-12));
  CHECK_THROWS_AS(affine_inverse({1, 2, 0, 2, 4, 0}), std::domain_error);
  const Affine rot90{0, -1, 0, 1, 0, 0};
  CHECK(transform_box(rot90, {1, 2, 3, 5}) == BBox{-5, 1, -2, 3});
}

TEST_CASE("diffusion: identical boxes under identity are a fixed point") {
  const MatchGraph g = one_class({"p", "q"}, {edge("p", "q", 30)});
  const auto r = diffuse_bboxes(g, {{"p", {1, 1, 5, 6}}, {"q", {1, 1, 5, 6}}});
  CHECK(r.converged);
  REQUIRE(r.max_displacement.size() == 1);
  CHECK(r.max_displacement[0] == 0.0);
  CHECK(r.boxes.at("q") == BBox{1, 1, 5, 6});
}

TEST_CASE("diffusion: translation pair converges to the consistent pair") {
  const double tx = 7, ty = -3;
  const MatchGraph g = one_class({"p", "q"}, {edge("p", "q", 30, {1, 0, tx, 0, 1, ty})});
  const BBox p0{0, 0, 10, 8}, q0{9, -1, 16, 6};
  const auto r = diffuse_bboxes(g, {{"p", p0}, {"q", q0}}, {.alpha = 0.1, .tol = 1e-6, .max_iter = 500});
  REQUIRE(r.converged);
  // Oracle: with two proposals per node the update is linear, the mismatch
  // q - (p + t) shrinks by 1 - 2 alpha per sweep and p + q - t is conserved.
  const BBox p_star{(p0.x0 + q0.x0 - tx) / 2, (p0.y0 + q0.y0 - ty) / 2, (p0.x1 + q0.x1 - tx) / 2,
                    (p0.y1 + q0.y1 - ty) / 2};
  const BBox q_star{p_star.x0 + tx, p_star.y0 + ty, p_star.x1 + tx, p_star.y1 + ty};
  CHECK(max_corner_error(r.boxes.at("p"), p_star) < 1e-3);
  CHECK(max_corner_error(r.boxes.at("q"), q_star) < 1e-3);
  const double first = r.max_displacement.front();
  for (std::size_t k = 1; k < r.max_displacement.size(); ++k) {
    CHECK(r.max_displacement[k] == doctest::Approx(first * std::pow(0.8, k)).epsilon(1e-6));
  }

  const BBox q_consistent{tx, ty, 10 + tx, 8 + ty};
  const auto c = diffuse_bboxes(g, {{"p", p0}, {"q", q_consistent}});
  CHECK(c.converged);
  CHECK(max_corner_error(c.boxes.at("q"), q_consistent) < 1e-3);
}

namespace {

// Ring of six nodes whose ground-truth boxes are related by the edge affines.
// Initial boxes are the truth with width and height scaled by up to +-20%
// about the centre, or with every corner moved by up to 20% of the box size.
struct Ring {
  MatchGraph graph;
  std::vector<Affine> poses;  // canonical frame -> node
  std::vector<BBox> truth;
  std::map<std::string, BBox> init;
};

enum class Jitter { size, corners };

const BBox kCanonical{-40, -30, 40, 30};

Ring make_ring(std::mt19937_64& rng, bool scale, double max_rotation, Jitter jitter = Jitter::corners) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(60, 200), sc(0.7, 1.4);
  std::vector<Affine> poses(6);
  Ring ring;
  for (int k = 0; k < 6; ++k) {
    const double s = scale ? sc(rng) : 1.0, t = max_rotation * u(rng);
    poses[k] = {s * std::cos(t), -s * std::sin(t), pos(rng), s * std::sin(t), s * std::cos(t), pos(rng)};
    const BBox truth = transform_box_centre(poses[k], kCanonical);
    ring.truth.push_back(truth);
    const std::string id = node("r", k);
    ring.graph.labels[id] = 0;
    const double w = truth.x1 - truth.x0, h = truth.y1 - truth.y0;
    if (jitter == Jitter::corners) {
      ring.init[id] = {truth.x0 + 0.2 * w * u(rng), truth.y0 + 0.2 * h * u(rng),
                       truth.x1 + 0.2 * w * u(rng), truth.y1 + 0.2 * h * u(rng)};
    } else {
      const double fx = 1.0 + 0.2 * u(rng), fy = 1.0 + 0.2 * u(rng);
      const double cx = 0.5 * (truth.x0 + truth.x1), cy = 0.5 * (truth.y0 + truth.y1);
      ring.init[id] = {cx - 0.5 * fx * w, cy - 0.5 * fy * h, cx + 0.5 * fx * w, cy + 0.5 * fy * h};
    }
  }
  ring.poses = poses;
  for (int k = 0; k < 6; ++k) {
    const int n = (k + 1) % 6;
    ring.graph.edges.push_back(
        edge(node("r", k), node("r", n), 40, affine_compose(poses[n], affine_inverse(poses[k]))));
  }
  return ring;
}

}  // namespace

TEST_CASE("diffusion on a ring converges to the average of the initial boxes") {
  // Two proposals per node merge to their midpoint, so in the canonical frame
  // the sweep is linear averaging and its fixed point is the mean box.
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Ring ring = make_ring(rng, true, trial % 3 == 0 ? 0.0 : 0.5);
    BBox mean{0, 0, 0, 0};
    for (int k = 0; k < 6; ++k) {
      const BBox c = transform_box_centre(affine_inverse(ring.poses[k]), ring.init.at(node("r", k)));
      mean = {mean.x0 + c.x0 / 6, mean.y0 + c.y0 / 6, mean.x1 + c.x1 / 6, mean.y1 + c.y1 / 6};
    }
    const auto r = diffuse_bboxes(ring.graph, ring.init, {.alpha = 0.1, .tol = 1e-7, .max_iter = 1000});
    CHECK(r.converged);
    for (int k = 0; k < 6; ++k) {
      const BBox& b = r.boxes.at(node("r", k));
      CHECK(b.well_formed());
      CHECK(max_corner_error(b, transform_box_centre(ring.poses[k], mean)) < 1e-4);
    }
  }
}

TEST_CASE("diffusion on a jittered ring of six reaches IoU 0.9") {
  std::mt19937_64 rng(0);
  const Ring ring = make_ring(rng, true, 0.5, Jitter::size);
  const auto r = diffuse_bboxes(ring.graph, ring.init, {.alpha = 0.1, .tol = 1e-3, .max_iter = 200});
  CHECK(r.converged);
  for (int k = 0; k < 6; ++k) {
    const std::string id = node("r", k);
    CHECK(iou(r.boxes.at(id), ring.truth[k]) >= 0.9);
  }
}

TEST_CASE("diffusion displacement decreases on translation-consistent rings") {
  // With pure translations every node's update is a convex combination of
  // shifted boxes, so the largest corner move cannot grow. Under scaling the
  // pixel displacements of different nodes are weighted differently and the
  // maximum may rise even though the iteration contracts.
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Ring ring = make_ring(rng, false, 0.0);
    const auto r = diffuse_bboxes(ring.graph, ring.init, {.alpha = 0.1, .tol = 1e-4, .max_iter = 400});
    CHECK(r.converged);
    for (std::size_t k = 1; k < r.max_displacement.size(); ++k) {
      CHECK(r.max_displacement[k] <= r.max_displacement[k - 1] + 1e-12);
    }
    for (const auto& [id, b] : r.boxes) CHECK(b.well_formed());
  }
}

TEST_CASE("corner-rectangle proposals inflate boxes around a rotated ring") {
  std::mt19937_64 rng(2);
  const Ring ring = make_ring(rng, false, 0.5);
  DiffusionConfig corners{.alpha = 0.1, .proposal = BoxProposal::corners, .tol = 1e-3, .max_iter = 200};
  const auto r = diffuse_bboxes(ring.graph, ring.init, corners);
  const BBox& b = r.boxes.at(node("r", 0));
  CHECK(b.area() > 4.0 * ring.truth[0].area());
  CHECK(parse_box_proposal("corners") == BoxProposal::corners);
  CHECK_THROWS_AS(parse_box_proposal("median"), std::invalid_argument);
}

TEST_CASE("diffusion skips a singular reverse affine") {
  const MatchGraph g = one_class({"p", "q"}, {edge("p", "q", 30, {1, 1, 0, 1, 1, 0})});
  const auto r = diffuse_bboxes(g, {{"p", {0, 0, 2, 3}}, {"q", {0, 0, 5, 5}}});
  CHECK(r.boxes.at("p") == BBox{0, 0, 2, 3});  // nothing proposes for p
  CHECK(r.boxes.at("q").well_formed());
}

TEST_CASE("match records round-trip through JSON lines and reject bad input") {
  MatchRecord r = edge("a", "b", 12.5, {1.5, 0.25, -3, 0.5, 2, 7});
  r.box_i = {1, 2, 3, 4};
  r.box_j = {0.5, 0.25, 9, 10};
  const MatchRecord back = match_record_from_json(match_record_to_json(r));
  CHECK(back.i == "a");
  CHECK(back.score == 12.5);
  CHECK(back.affine == r.affine);
  CHECK(back.box_j == r.box_j);
  CHECK_THROWS_AS(match_record_from_json("{"), FormatError);
  CHECK_THROWS_AS(match_record_from_json(R"({"i":"a","j":"b","score":-1,"affine":[1,0,0,0,1,0],"box_i":[0,0,1,1],"box_j":[0,0,1,1]})"),
                  FormatError);
  CHECK_THROWS_AS(match_record_from_json(R"({"i":"a","j":"b","score":1,"affine":[1,0,0,0,1,0],"box_i":[2,0,1,1],"box_j":[0,0,1,1]})"),
                  FormatError);
}

TEST_CASE("cleaning the synthetic collection drops the planted noise") {
  SyntheticConfig cfg;
  cfg.classes = 2;
  cfg.train_classes = 4;
  cfg.seed = 3;
  const SyntheticDataset data = generate_synthetic(cfg);
  const CleanResult res = clean_collection(data.manifest, data.matches, {});
  REQUIRE(res.classes.size() == 4);

  std::map<std::string, const SyntheticImage*> by_id;
  for (const auto& s : data.images) by_id[s.id] = &s;
  double iou_sum = 0.0;
  std::size_t boxed = 0, retained = 0;
  for (const auto& c : res.classes) {
    CHECK(c.input_images == cfg.train_images_per_class + cfg.noise_per_class);
    for (const auto& id : c.retained) {
      const SyntheticImage& s = *by_id.at(id);
      CHECK_FALSE(s.noise);
      CHECK(s.label == c.label);
      ++retained;
    }
  }
  for (const auto& [id, box] : res.boxes) {
    CHECK(box.well_formed());
    iou_sum += iou(box, by_id.at(id)->gt_box);
    ++boxed;
  }
  CHECK(retained >= 4 * cfg.train_images_per_class * 3 / 4);
  REQUIRE(boxed > 0);
  MESSAGE("mean box IoU " << iou_sum / boxed);
  CHECK(iou_sum / boxed >= 0.6);

  const Manifest cleaned = apply_cleaning(data.manifest, res);
  CHECK(cleaned.select("train").size() == retained);
  CHECK(cleaned.select("test").size() == data.manifest.select("test").size());
  for (const auto* e : cleaned.select("train")) CHECK(e->roi.has_value() == res.boxes.contains(e->id));
  CHECK(boxes_from_json(boxes_to_json(res.boxes)) == res.boxes);
}
