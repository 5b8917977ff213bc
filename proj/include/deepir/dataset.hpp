#pragma once

// Dataset manifest (JSON) and in-memory labeled image sets.
//
// {
//   "version": 1,
//   "protocol": {"remove_query": false, "crop_query": true},
//   "entries": [{"id": "...", "path": "images/x.ppm", "label": 3, "split": "test",
//                "query": true, "roi": [x0, y0, x1, y1],
//                "positives": ["..."], "ignores": ["..."]}, ...]
// }
//
// Paths are relative to the manifest's directory. Only id, path and label are
// required per entry.

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deepir/image.hpp"

namespace deepir {

inline constexpr int kManifestVersion = 1;

// Pixel box [x0, x1) x [y0, y1) in floating-point image coordinates.
struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool well_formed() const { return x0 < x1 && y0 < y1; }
  double area() const { return well_formed() ? (x1 - x0) * (y1 - y0) : 0.0; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

double iou(const BBox& a, const BBox& b);

struct ManifestEntry {
  std::string id;
  std::string path;
  int label = 0;
  std::string split;
  bool query = false;
  std::optional<BBox> roi;
  std::vector<std::string> positives;
  std::vector<std::string> ignores;
};

struct Protocol {
  bool remove_query = false;
  bool crop_query = false;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  Protocol protocol;
  std::filesystem::path root;  // directory that entry paths are relative to

  const ManifestEntry* find(const std::string& id) const;
  std::filesystem::path image_path(const ManifestEntry& e) const { return root / e.path; }
  // Entries whose split equals `split` (all entries when split is empty).
  std::vector<const ManifestEntry*> select(const std::string& split) const;
};

// Parses and validates: unique ids, query entries carry positives, disjoint
// positive/ignore sets. Throws FormatError.
Manifest parse_manifest(const std::string& json_text, const std::filesystem::path& root);
Manifest load_manifest(const std::filesystem::path& path);
std::string manifest_to_json(const Manifest& manifest);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Decoded images with integer class labels, in manifest order.
struct LabeledSet {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<Image> images;

  std::size_t size() const { return ids.size(); }
  std::size_t class_count() const;
};

// Loads the entries of `split`, optionally restricted to `keep` ids. Images are
// resized so their larger side equals `side` (0 keeps the native size).
LabeledSet load_labeled_set(const Manifest& manifest, const std::string& split,
                            std::size_t side, const std::set<std::string>* keep = nullptr);

}  // namespace deepir
