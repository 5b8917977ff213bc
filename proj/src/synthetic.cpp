#include "deepir/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "deepir/binary_io.hpp"
#include "json.hpp"

namespace deepir {

using nlohmann::json;

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic config: " + m); };
  if (classes < 2) fail("classes must be >= 2");
  if (images_per_class < 2) fail("images_per_class must be >= 2");
  if (queries_per_class > images_per_class) fail("queries_per_class exceeds images_per_class");
  if (train_classes == 1) fail("train_classes must be 0 or >= 2");
  if (min_size < 16 || min_size > max_size) fail("need 16 <= min_size <= max_size");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 2.0)) {
    fail("need 0 < scale_min <= scale_max <= 2");
  }
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) fail("max_rotation_deg in [0, 180]");
  if (!(max_offset >= 0.0 && max_offset <= 0.5)) fail("max_offset in [0, 0.5]");
  if (!(brightness_jitter >= 0.0 && brightness_jitter < 1.0)) fail("brightness_jitter in [0, 1)");
  if (!(clutter >= 0.0 && clutter <= 1.0)) fail("clutter in [0, 1]");
  if (!(junk_visibility >= 0.0 && junk_visibility <= 1.0)) fail("junk_visibility in [0, 1]");
  if (!(db_zoom_min > 0.0 && db_zoom_min <= db_zoom_max)) fail("need 0 < db_zoom_min <= db_zoom_max");
}

namespace {

using Rgb = std::array<double, 3>;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Rgb random_color(std::mt19937_64& rng) {
  return {uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)};
}

struct Shape2d {
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 0, ry = 0;
  Rgb color{};

  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }
};

Shape2d random_shape(std::mt19937_64& rng, double w, double h, double smin, double smax) {
  Shape2d s;
  s.ellipse = uniform(rng, 0.0, 1.0) < 0.5;
  s.cx = uniform(rng, 0.0, w);
  s.cy = uniform(rng, 0.0, h);
  s.rx = uniform(rng, smin, smax) * w * 0.5;
  s.ry = uniform(rng, smin, smax) * h * 0.5;
  s.color = random_color(rng);
  return s;
}

// Planar landmark on the unit square: base colour, horizontal bands, a window
// lattice and a few blobs.
class Landmark {
 public:
  explicit Landmark(std::mt19937_64 rng) {
    base_ = random_color(rng);
    const int bands = 2 + static_cast<int>(rng() % 3);
    for (int b = 0; b < bands; ++b) {
      const double y0 = uniform(rng, 0.0, 0.9);
      bands_.push_back({y0, y0 + uniform(rng, 0.05, 0.3), random_color(rng)});
    }
    period_x_ = uniform(rng, 0.08, 0.25);
    period_y_ = uniform(rng, 0.08, 0.25);
    fill_ = uniform(rng, 0.3, 0.7);
    window_top_ = uniform(rng, 0.0, 0.4);
    window_bottom_ = uniform(rng, 0.6, 1.0);
    window_color_ = random_color(rng);
    const int blobs = 2 + static_cast<int>(rng() % 3);
    for (int b = 0; b < blobs; ++b) blobs_.push_back(random_shape(rng, 1.0, 1.0, 0.1, 0.35));
  }

  Rgb color(double u, double v) const {
    Rgb c = base_;
    for (const auto& [y0, y1, col] : bands_) {
      if (v >= y0 && v < y1) c = col;
    }
    if (v >= window_top_ && v < window_bottom_) {
      const double fx = std::fmod(u / period_x_, 1.0), fy = std::fmod(v / period_y_, 1.0);
      if (fx < fill_ && fy < fill_) c = window_color_;
    }
    for (const auto& b : blobs_) {
      if (b.contains(u, v)) c = b.color;
    }
    return c;
  }

 private:
  struct Band {
    double y0, y1;
    Rgb color;
  };
  Rgb base_{};
  std::vector<Band> bands_;
  double period_x_ = 0.1, period_y_ = 0.1, fill_ = 0.5;
  double window_top_ = 0, window_bottom_ = 1;
  Rgb window_color_{};
  std::vector<Shape2d> blobs_;
};

enum SplitCode : std::uint64_t { kTrain = 1, kTest = 2, kDistractor = 3 };
constexpr std::uint64_t kTextureStream = 0xffffffffULL;

std::string make_id(const char* prefix, std::size_t cls, char kind, std::size_t idx) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_c%03zu_%c%03zu", prefix, cls, kind, idx);
  return buf;
}

struct RenderSpec {
  const Landmark* landmark = nullptr;  // null renders background only
  double zoom = 1.0;
};

SyntheticImage render(const SyntheticConfig& cfg, std::mt19937_64 rng, const RenderSpec& spec) {
  SyntheticImage out;
  std::uniform_int_distribution<std::size_t> size(cfg.min_size, cfg.max_size);
  const std::size_t h = size(rng), w = size(rng);
  const double W = static_cast<double>(w), H = static_cast<double>(h);

  // Background: flat grey blended towards a random gradient and clutter shapes.
  const Rgb grey{0.5, 0.5, 0.5};
  const Rgb ga = random_color(rng), gb = random_color(rng);
  std::vector<Shape2d> clutter, occluders;
  const auto n_clutter = static_cast<std::size_t>(std::lround(cfg.clutter * 12.0));
  for (std::size_t i = 0; i < n_clutter; ++i) clutter.push_back(random_shape(rng, W, H, 0.05, 0.3));
  const auto n_occ = static_cast<std::size_t>(std::lround(cfg.clutter * 2.0));
  for (std::size_t i = 0; i < n_occ; ++i) occluders.push_back(random_shape(rng, W, H, 0.05, 0.2));

  const double scale = uniform(rng, cfg.scale_min, cfg.scale_max) * spec.zoom;
  const double theta = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg) *
                       std::numbers::pi / 180.0;
  const double cx = W * (0.5 + uniform(rng, -cfg.max_offset, cfg.max_offset));
  const double cy = H * (0.5 + uniform(rng, -cfg.max_offset, cfg.max_offset));
  const double gain = 1.0 + uniform(rng, -cfg.brightness_jitter, cfg.brightness_jitter);
  const double side = scale * std::min(W, H);
  const double a = side * std::cos(theta), c = side * std::sin(theta);
  out.pose = {a, -c, cx - 0.5 * (a - c), c, a, cy - 0.5 * (c + a)};
  const Affine inv = affine_inverse(out.pose);

  auto sample = [&](double x, double y) -> Rgb {
    for (auto it = occluders.rbegin(); it != occluders.rend(); ++it) {
      if (it->contains(x, y)) return it->color;
    }
    if (spec.landmark) {
      const auto [u, v] = affine_apply(inv, x, y);
      if (u >= 0.0 && u < 1.0 && v >= 0.0 && v < 1.0) {
        Rgb col = spec.landmark->color(u, v);
        for (double& ch : col) ch = std::clamp(ch * gain, 0.0, 1.0);
        return col;
      }
    }
    Rgb col;
    for (auto it = clutter.rbegin(); it != clutter.rend(); ++it) {
      if (it->contains(x, y)) {
        col = it->color;
        for (int k = 0; k < 3; ++k) col[k] = (1.0 - cfg.clutter) * grey[k] + cfg.clutter * col[k];
        return col;
      }
    }
    const double t = (x / W + y / H) * 0.5;
    for (int k = 0; k < 3; ++k) {
      col[k] = (1.0 - cfg.clutter) * grey[k] + cfg.clutter * ((1.0 - t) * ga[k] + t * gb[k]);
    }
    return col;
  };

  Image img(h, w);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sigma = 0.04 * cfg.clutter;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      Rgb acc{0, 0, 0};
      for (double sy : {0.25, 0.75}) {
        for (double sx : {0.25, 0.75}) {
          const Rgb s = sample(static_cast<double>(x) + sx, static_cast<double>(y) + sy);
          for (int k = 0; k < 3; ++k) acc[k] += 0.25 * s[k];
        }
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = sigma > 0.0 ? acc[k] + sigma * noise(rng) : acc[k];
        // Quantize to what an 8-bit PPM round trip stores.
        img.at(k, y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      }
    }
  }
  out.image = std::move(img);

  if (spec.landmark) {
    double x0 = W, y0 = H, x1 = 0, y1 = 0;
    for (auto [u, v] : {std::pair{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}}) {
      const auto [x, y] = affine_apply(out.pose, u, v);
      x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
    }
    out.gt_box = {std::max(0.0, x0), std::max(0.0, y0), std::min(W, x1), std::min(H, y1)};
    std::size_t seen = 0;
    for (std::size_t gy = 0; gy < kLandmarkGrid; ++gy) {
      for (std::size_t gx = 0; gx < kLandmarkGrid; ++gx) {
        const double u = (static_cast<double>(gx) + 0.5) / kLandmarkGrid;
        const double v = (static_cast<double>(gy) + 0.5) / kLandmarkGrid;
        const auto [x, y] = affine_apply(out.pose, u, v);
        bool ok = x >= 0.0 && x < W && y >= 0.0 && y < H;
        for (const auto& o : occluders) ok = ok && !o.contains(x, y);
        out.visible_points.push_back(ok);
        seen += ok ? 1 : 0;
      }
    }
    out.visibility = static_cast<double>(seen) / (kLandmarkGrid * kLandmarkGrid);
  }
  return out;
}

// Matches between two renderings of the same landmark: the commonly visible grid points.
void add_true_match(const SyntheticImage& a, const SyntheticImage& b,
                    std::vector<MatchRecord>& out) {
  BBox ba{1e300, 1e300, -1e300, -1e300}, bb = ba;
  std::size_t common = 0;
  for (std::size_t k = 0; k < a.visible_points.size(); ++k) {
    if (!a.visible_points[k] || !b.visible_points[k]) continue;
    ++common;
    const double u = (static_cast<double>(k % kLandmarkGrid) + 0.5) / kLandmarkGrid;
    const double v = (static_cast<double>(k / kLandmarkGrid) + 0.5) / kLandmarkGrid;
    const auto pa = affine_apply(a.pose, u, v);
    const auto pb = affine_apply(b.pose, u, v);
    ba = {std::min(ba.x0, pa[0]), std::min(ba.y0, pa[1]), std::max(ba.x1, pa[0]), std::max(ba.y1, pa[1])};
    bb = {std::min(bb.x0, pb[0]), std::min(bb.y0, pb[1]), std::max(bb.x1, pb[0]), std::max(bb.y1, pb[1])};
  }
  if (common < 3 || !ba.well_formed() || !bb.well_formed()) return;
  out.push_back({a.id, b.id, static_cast<double>(common),
                 affine_compose(b.pose, affine_inverse(a.pose)), ba, bb});
}

// Spurious verification between unrelated images: few inliers, arbitrary transform.
void maybe_add_false_match(const SyntheticImage& a, const SyntheticImage& b, std::mt19937_64& rng,
                           std::vector<MatchRecord>& out) {
  if (uniform(rng, 0.0, 1.0) >= 0.3) return;
  const double score = static_cast<double>(1 + rng() % 4);
  const double tx = uniform(rng, -20.0, 20.0), ty = uniform(rng, -20.0, 20.0);
  auto small_box = [&](const Image& img) {
    const double x = uniform(rng, 0.0, img.width() * 0.8), y = uniform(rng, 0.0, img.height() * 0.8);
    return BBox{x, y, x + img.width() * 0.1, y + img.height() * 0.1};
  };
  const BBox bi = small_box(a.image), bj = small_box(b.image);
  out.push_back({a.id, b.id, score, {1.0, 0.0, tx, 0.0, 1.0, ty}, bi, bj});
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset data;
  data.manifest.protocol = {.remove_query = true, .crop_query = true};

  // Training landmarks, each with planted noise images showing unrelated landmarks.
  for (std::size_t c = 0; c < cfg.train_classes; ++c) {
    const Landmark lm(stream_rng(cfg.seed, kTrain, c, kTextureStream));
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < cfg.train_images_per_class; ++i) {
      SyntheticImage s = render(cfg, stream_rng(cfg.seed, kTrain, c, i), {&lm, 1.0});
      s.id = make_id("tr", c, 'i', i);
      s.label = static_cast<int>(c);
      s.split = "train";
      members.push_back(data.images.size());
      data.images.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < cfg.noise_per_class; ++i) {
      const Landmark other(stream_rng(cfg.seed, kDistractor, c, i));
      SyntheticImage s = render(cfg, stream_rng(cfg.seed, kDistractor, c, i + 1000), {&other, 1.0});
      s.id = make_id("tr", c, 'n', i);
      s.label = static_cast<int>(c);
      s.split = "train";
      s.noise = true;
      members.push_back(data.images.size());
      data.images.push_back(std::move(s));
    }
    std::mt19937_64 match_rng = stream_rng(cfg.seed, kTrain, c, kTextureStream - 1);
    for (std::size_t x = 0; x < members.size(); ++x) {
      for (std::size_t y = x + 1; y < members.size(); ++y) {
        const auto& a = data.images[members[x]];
        const auto& b = data.images[members[y]];
        if (!a.noise && !b.noise) {
          add_true_match(a, b, data.matches);
        } else {
          maybe_add_false_match(a, b, match_rng, data.matches);
        }
      }
    }
  }

  // Benchmark landmarks; database images may get an extra zoom.
  const int label_base = static_cast<int>(cfg.train_classes);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const Landmark lm(stream_rng(cfg.seed, kTest, c, kTextureStream));
    const std::size_t first = data.images.size();
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      std::mt19937_64 rng = stream_rng(cfg.seed, kTest, c, i);
      double zoom = 1.0;
      if (i >= cfg.queries_per_class && cfg.db_zoom_max > cfg.db_zoom_min) {
        std::mt19937_64 zrng = stream_rng(cfg.seed, kTest, c, i + 5000);
        zoom = std::exp(uniform(zrng, std::log(cfg.db_zoom_min), std::log(cfg.db_zoom_max)));
      } else if (i >= cfg.queries_per_class) {
        zoom = cfg.db_zoom_min;
      }
      SyntheticImage s = render(cfg, rng, {&lm, zoom});
      s.id = make_id("te", c, 'i', i);
      s.label = label_base + static_cast<int>(c);
      s.split = "test";
      data.images.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      const auto& s = data.images[first + i];
      ManifestEntry e;
      e.id = s.id;
      e.path = "images/" + s.id + ".ppm";
      e.label = s.label;
      e.split = "test";
      if (i < cfg.queries_per_class) {
        e.query = true;
        e.roi = BBox{std::floor(s.gt_box.x0), std::floor(s.gt_box.y0), std::ceil(s.gt_box.x1),
                     std::ceil(s.gt_box.y1)};
        for (std::size_t j = 0; j < cfg.images_per_class; ++j) {
          if (j == i) continue;
          const auto& other = data.images[first + j];
          (other.visibility >= cfg.junk_visibility ? e.positives : e.ignores).push_back(other.id);
        }
        if (e.positives.empty()) {
          // Keep the query meaningful even when every match is heavily occluded.
          e.positives.swap(e.ignores);
        }
      }
      data.manifest.entries.push_back(std::move(e));
    }
  }

  for (const auto& s : data.images) {
    if (s.split != "train") continue;
    ManifestEntry e;
    e.id = s.id;
    e.path = "images/" + s.id + ".ppm";
    e.label = s.label;
    e.split = "train";
    data.manifest.entries.push_back(std::move(e));
  }
  return data;
}

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  json boxes = json::object();
  for (const auto& s : data.images) {
    write_file_atomic(dir / "images" / (s.id + ".ppm"), encode_ppm(s.image));
    if (!s.noise) boxes[s.id] = {s.gt_box.x0, s.gt_box.y0, s.gt_box.x1, s.gt_box.y1};
  }
  save_manifest(dir / "manifest.json", data.manifest);
  write_file_atomic(dir / "boxes.json", boxes.dump(1) + "\n");
  write_match_records(dir / "matches.jsonl", data.matches);
}

}  // namespace deepir
