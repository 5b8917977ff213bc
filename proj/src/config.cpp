#include "deepir/config.hpp"

#include <algorithm>
#include <charconv>
#include <map>

namespace deepir {

using nlohmann::json;

const std::vector<KeySpec>& config_keys() {
  using T = ValueType;
  static const std::vector<KeySpec> keys = {
      {"seed", T::count, nullptr, "global seed; required by generate, train-cls, train-rank, compress-pq"},
      {"out", T::text, "", "output directory"},
      {"manifest", T::text, "", "dataset manifest"},
      {"matches", T::text, "", "match records (JSON lines)"},
      {"checkpoint", T::text, "", "model checkpoint to read"},
      {"descriptors", T::text, "", "descriptor store to read"},
      {"index", T::text, "", "database descriptor store"},
      {"queries", T::text, "", "query descriptor store"},
      {"codebook", T::text, "", "PQ codebook"},
      {"codes", T::text, "", "PQ code store"},
      {"regions", T::text, "", "optional region list replacing the rigid grid"},

      {"synthetic.classes", T::count, 20, "benchmark landmarks"},
      {"synthetic.images_per_class", T::count, 10, ""},
      {"synthetic.queries_per_class", T::count, 5, ""},
      {"synthetic.train_classes", T::count, 20, "training landmarks"},
      {"synthetic.train_images_per_class", T::count, 10, ""},
      {"synthetic.noise_per_class", T::count, 2, "mislabeled images per training class"},
      {"synthetic.min_size", T::count, 96, "image side range"},
      {"synthetic.max_size", T::count, 160, ""},
      {"synthetic.scale_min", T::number, 0.45, "landmark side / shorter image side"},
      {"synthetic.scale_max", T::number, 0.8, ""},
      {"synthetic.max_rotation_deg", T::number, 15.0, ""},
      {"synthetic.max_offset", T::number, 0.15, ""},
      {"synthetic.brightness_jitter", T::number, 0.15, ""},
      {"synthetic.clutter", T::number, 0.6, ""},
      {"synthetic.junk_visibility", T::number, 0.4, ""},
      {"synthetic.db_zoom_min", T::number, 1.0, "database landmark zoom range"},
      {"synthetic.db_zoom_max", T::number, 1.0, ""},

      {"clean.split", T::text, "train", ""},
      {"clean.threshold", T::number, 10.0, "minimum verified inliers per edge"},
      {"clean.alpha", T::number, 0.1, "diffusion step"},
      {"clean.proposal", T::text, "centre_scale", "centre_scale or corners"},
      {"clean.tol", T::number, 1e-3, "convergence, pixels"},
      {"clean.max_iter", T::count, 200, ""},

      {"model.depth", T::count, 3, "conv layers"},
      {"model.channels", T::count, 32, ""},
      {"grid.levels", T::count, 3, ""},
      {"grid.overlap", T::number, 0.4, ""},
      {"pca.dim", T::count, 24, "descriptor dimension"},
      {"pca.side", T::count, 128, "image side used to fit the PCA layer"},

      {"cls.lr", T::number, 1e-2, ""},
      {"cls.momentum", T::number, 0.9, ""},
      {"cls.weight_decay", T::number, 5e-5, ""},
      {"cls.batch_size", T::count, 16, ""},
      {"cls.iterations", T::count, 300, ""},
      {"cls.crop", T::count, 64, ""},
      {"cls.side", T::count, 128, ""},
      {"cls.lr_drop_at", T::count, 225, "0 disables"},
      {"cls.lr_drop", T::number, 0.1, ""},

      {"train.margin", T::number, 0.5, ""},
      {"train.lr", T::number, 1e-4, ""},
      {"train.momentum", T::number, 0.9, ""},
      {"train.weight_decay", T::number, 5e-5, ""},
      {"train.batch_size", T::count, 16, ""},
      {"train.pool_size", T::count, 200, "images described per mining round"},
      {"train.refresh_every", T::count, 64, "iterations between mining rounds"},
      {"train.keep", T::count, 25, "triplets kept per query"},
      {"train.iterations", T::count, 150, ""},
      {"train.head_lr_scale", T::number, 1.0, "learning-rate multiplier of the PCA layer"},
      {"train.crop_fraction", T::number, 0.05, ""},
      {"train.side", T::count, 128, ""},
      {"train.mode", T::text, "joint", "joint or single_stream"},

      {"extract.split", T::text, "test", ""},
      {"extract.query_scales", T::count_list, json::array({128}), "larger-side lengths"},
      {"extract.db_scales", T::count_list, json::array({128}), ""},
      {"extract.rotations", T::boolean, false, "also describe queries turned by 90 and 270 degrees"},
      {"store.f32", T::boolean, false, "32-bit descriptor storage"},

      {"qe.k", T::count, 0, "query expansion neighbours, 0 disables"},
      {"dba.k", T::count, 0, "database augmentation neighbours, 0 disables"},
      {"search.topk", T::count, 100, "0 keeps every result"},

      {"compress.pca_dim", T::count, 16, ""},
      {"pq.m", T::count, 8, "subquantizers (bytes per code)"},
      {"pq.ksub", T::count, 256, ""},
      {"pq.iterations", T::count, 25, ""},

      {"eval.keep", T::count, 100, "ranked-list length kept in the report"},
      {"eval.curves", T::boolean, true, "write per-query AP curves"},
      {"eval.grid", T::boolean, false, "write the QE/DBA grid"},
      {"eval.grid_max_qe", T::count, 10, ""},
      {"eval.grid_dba", T::count_list, json::array({0, 20}), ""},
  };
  return keys;
}

namespace {

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::string type_name(ValueType t) {
  switch (t) {
    case ValueType::boolean: return "boolean";
    case ValueType::count: return "non-negative integer";
    case ValueType::number: return "number";
    case ValueType::text: return "string";
    case ValueType::count_list: return "list of non-negative integers";
  }
  return "?";
}

bool matches(const json& v, ValueType t) {
  switch (t) {
    case ValueType::boolean: return v.is_boolean();
    case ValueType::count: return v.is_number_unsigned();
    case ValueType::number: return v.is_number();
    case ValueType::text: return v.is_string();
    case ValueType::count_list:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number_unsigned(); });
  }
  return false;
}

const KeySpec& require_key(const std::string& name) {
  const KeySpec* spec = find_key(name);
  if (!spec) {
    throw ConfigError("unknown config key \"" + name + "\" (did you mean \"" + nearest_key(name) + "\"?)");
  }
  return *spec;
}

void check_type(const KeySpec& spec, const json& v) {
  if (!matches(v, spec.type)) {
    throw ConfigError("config key \"" + spec.name + "\" expects a " + type_name(spec.type) + ", got " +
                      v.dump());
  }
}

bool parse_count(const std::string& s, std::uint64_t& out) {
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && !s.empty();
}

json parse_flag_value(const KeySpec& spec, const std::string& text) {
  auto fail = [&]() -> json {
    throw ConfigError("config key \"" + spec.name + "\" expects a " + type_name(spec.type) + ", got \"" +
                      text + "\"");
  };
  switch (spec.type) {
    case ValueType::boolean:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      return fail();
    case ValueType::count: {
      std::uint64_t v = 0;
      return parse_count(text, v) ? json(v) : fail();
    }
    case ValueType::number: {
      double v = 0;
      const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      return ec == std::errc() && p == text.data() + text.size() && !text.empty() ? json(v) : fail();
    }
    case ValueType::text:
      return text;
    case ValueType::count_list: {
      json arr = json::array();
      std::size_t start = 0;
      while (start <= text.size()) {
        const std::size_t comma = std::min(text.find(',', start), text.size());
        std::uint64_t v = 0;
        if (!parse_count(text.substr(start, comma - start), v)) return fail();
        arr.push_back(v);
        start = comma + 1;
      }
      return arr;
    }
  }
  return fail();
}

void flatten(const json& node, const std::string& prefix, std::map<std::string, json>& out) {
  for (const auto& [k, v] : node.items()) {
    const std::string name = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, name, out);
    } else {
      out[name] = v;
    }
  }
}

}  // namespace

std::string nearest_key(const std::string& name) {
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& k : config_keys()) {
    // A bare leaf ("margn") is compared against the part after the last dot too.
    const std::string leaf = k.name.substr(k.name.rfind('.') + 1);
    const std::size_t d = std::min(edit_distance(name, k.name), edit_distance(name, leaf));
    if (d < best_d) {
      best_d = d;
      best = k.name;
    }
  }
  return best;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.fallback;
}

RunConfig RunConfig::merge(const std::string& file_text, const std::vector<std::string>& assignments) {
  RunConfig cfg;
  if (file_text.find_first_not_of(" \t\r\n") != std::string::npos) {
    json doc;
    try {
      doc = json::parse(file_text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config file: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config file: top level must be an object");
    std::map<std::string, json> flat;
    flatten(doc, "", flat);
    for (const auto& [k, v] : flat) cfg.set(k, v);
  }
  for (const auto& a : assignments) {
    const std::size_t eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override \"" + a + "\" is not of the form key=value");
    }
    const std::string key = a.substr(0, eq);
    cfg.set(key, parse_flag_value(require_key(key), a.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const json& v) {
  const KeySpec& spec = require_key(key);
  check_type(spec, v);
  values_[key] = v;
}

bool RunConfig::has(const std::string& key) const {
  require_key(key);
  return !values_.at(key).is_null();
}

const json& RunConfig::value(const std::string& key, ValueType type) const {
  const KeySpec& spec = require_key(key);
  if (spec.type != type) throw std::logic_error("config key " + key + " read with the wrong type");
  return values_.at(key);
}

bool RunConfig::get_bool(const std::string& key) const { return value(key, ValueType::boolean).get<bool>(); }

std::size_t RunConfig::get_count(const std::string& key) const {
  return value(key, ValueType::count).get<std::size_t>();
}

double RunConfig::get_number(const std::string& key) const {
  return value(key, ValueType::number).get<double>();
}

std::string RunConfig::get_text(const std::string& key) const {
  return value(key, ValueType::text).get<std::string>();
}

std::vector<std::size_t> RunConfig::get_counts(const std::string& key) const {
  return value(key, ValueType::count_list).get<std::vector<std::size_t>>();
}

std::uint64_t RunConfig::seed() const {
  const json& v = values_.at("seed");
  if (v.is_null()) throw ConfigError("missing seed: this command is stochastic and needs seed=<n>");
  return v.get<std::uint64_t>();
}

std::uint64_t RunConfig::sub_seed(const std::string& stage) const {
  // FNV-1a of the stage name, mixed with the global seed by splitmix64.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed() ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string RunConfig::to_json() const { return values_.dump(1) + "\n"; }

}  // namespace deepir
