#pragma once

// Procedural landmark benchmark: each class is a random planar texture pasted
// at a random similarity pose over cluttered backgrounds. Emits images, a
// manifest, ground-truth boxes and simulated verified-match records.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "deepir/cleaner.hpp"
#include "deepir/dataset.hpp"
#include "deepir/image.hpp"

namespace deepir {

struct SyntheticConfig {
  std::size_t classes = 20;            // test (benchmark) landmarks
  std::size_t images_per_class = 10;
  std::size_t queries_per_class = 5;
  std::size_t train_classes = 20;      // separate landmarks for training
  std::size_t train_images_per_class = 10;
  std::size_t noise_per_class = 2;     // mislabeled images planted in each train class
  std::size_t min_size = 96;
  std::size_t max_size = 160;
  double scale_min = 0.45;             // landmark side relative to the shorter image side
  double scale_max = 0.8;
  double max_rotation_deg = 15.0;
  double max_offset = 0.15;            // centre jitter, fraction of the image size
  double brightness_jitter = 0.15;
  double clutter = 0.6;                // 0 = flat grey background, no occluders, no noise
  double junk_visibility = 0.4;        // below this visible share an image is ignored
  double db_zoom_min = 1.0;            // extra landmark zoom for database images, log-uniform
  double db_zoom_max = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticImage {
  std::string id;
  int label = 0;
  std::string split;
  bool noise = false;      // planted mislabeled image
  Image image;
  Affine pose{};           // landmark unit square -> image pixels
  BBox gt_box;             // landmark extent clipped to the image
  double visibility = 0.0; // share of landmark sample points visible
  std::vector<bool> visible_points;
};

struct SyntheticDataset {
  std::vector<SyntheticImage> images;
  std::vector<MatchRecord> matches;
  Manifest manifest;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// Writes images/<id>.ppm, manifest.json, boxes.json and matches.jsonl under dir.
void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);

// Points sampled on the landmark's unit square that back the match simulation.
inline constexpr std::size_t kLandmarkGrid = 10;

}  // namespace deepir
