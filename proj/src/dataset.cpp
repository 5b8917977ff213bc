#include "deepir/dataset.hpp"

#include <algorithm>

#include "deepir/binary_io.hpp"
#include "json.hpp"

namespace deepir {

using nlohmann::json;

double iou(const BBox& a, const BBox& b) {
  const BBox inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
                   std::min(a.y1, b.y1)};
  const double i = inter.area();
  const double u = a.area() + b.area() - i;
  return u > 0.0 ? i / u : 0.0;
}

const ManifestEntry* Manifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

std::vector<const ManifestEntry*> Manifest::select(const std::string& split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (split.empty() || e.split == split) out.push_back(&e);
  }
  return out;
}

namespace {

BBox box_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw FormatError(where + ": box must be [x0,y0,x1,y1]");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.well_formed()) throw FormatError(where + ": box is not well-formed");
  return b;
}

}  // namespace

Manifest parse_manifest(const std::string& json_text, const std::filesystem::path& root) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  const int version = doc.value("version", 0);
  if (version != kManifestVersion) {
    throw FormatError("manifest: unsupported version " + std::to_string(version));
  }
  Manifest m;
  m.root = root;
  if (doc.contains("protocol")) {
    m.protocol.remove_query = doc["protocol"].value("remove_query", false);
    m.protocol.crop_query = doc["protocol"].value("crop_query", false);
  }
  std::set<std::string> seen;
  try {
    for (const auto& j : doc.at("entries")) {
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.label = j.at("label").get<int>();
      e.split = j.value("split", "");
      e.query = j.value("query", false);
      if (j.contains("roi")) e.roi = box_from_json(j["roi"], "manifest entry " + e.id);
      e.positives = j.value("positives", std::vector<std::string>{});
      e.ignores = j.value("ignores", std::vector<std::string>{});
      if (!seen.insert(e.id).second) throw FormatError("manifest: duplicate id " + e.id);
      if (e.query && e.positives.empty()) {
        throw FormatError("manifest: query " + e.id + " has no positives");
      }
      for (const auto& p : e.positives) {
        if (std::find(e.ignores.begin(), e.ignores.end(), p) != e.ignores.end()) {
          throw FormatError("manifest: " + p + " is both positive and ignored for " + e.id);
        }
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path), path.parent_path());
}

std::string manifest_to_json(const Manifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    json j{{"id", e.id}, {"path", e.path}, {"label", e.label}};
    if (!e.split.empty()) j["split"] = e.split;
    if (e.query) j["query"] = true;
    if (e.roi) j["roi"] = {e.roi->x0, e.roi->y0, e.roi->x1, e.roi->y1};
    if (!e.positives.empty()) j["positives"] = e.positives;
    if (!e.ignores.empty()) j["ignores"] = e.ignores;
    entries.push_back(std::move(j));
  }
  json doc{{"version", kManifestVersion},
           {"protocol",
            {{"remove_query", manifest.protocol.remove_query},
             {"crop_query", manifest.protocol.crop_query}}},
           {"entries", std::move(entries)}};
  return doc.dump(1) + "\n";
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  write_file_atomic(path, manifest_to_json(manifest));
}

std::size_t LabeledSet::class_count() const {
  return std::set<int>(labels.begin(), labels.end()).size();
}

LabeledSet load_labeled_set(const Manifest& manifest, const std::string& split, std::size_t side,
                            const std::set<std::string>* keep) {
  LabeledSet set;
  for (const ManifestEntry* e : manifest.select(split)) {
    if (keep && !keep->contains(e->id)) continue;
    Image img = load_image(manifest.image_path(*e));
    if (side > 0) img = resize_larger_side(img, side);
    set.ids.push_back(e->id);
    set.labels.push_back(e->label);
    set.images.push_back(std::move(img));
  }
  return set;
}

}  // namespace deepir
