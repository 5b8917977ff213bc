#pragma once

// Run configuration of the command-line pipeline: a flat table of typed keys
// with defaults, merged from a JSON file and `key=value` overrides.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace deepir {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ValueType { boolean, count, number, text, count_list };

struct KeySpec {
  std::string name;
  ValueType type;
  nlohmann::json fallback;  // null only for keys without a default (seed)
  std::string help;
};

// Every accepted key, in documentation order.
const std::vector<KeySpec>& config_keys();

// Closest known key by edit distance.
std::string nearest_key(const std::string& name);

class RunConfig {
 public:
  // Defaults only.
  RunConfig();

  // Merges defaults < `file_text` < `assignments` ("key=value"). The file may
  // be empty, flat ({"train.margin": 0.2}) or nested ({"train": {"margin": 0.2}}).
  // Throws ConfigError on unknown keys, type mismatches and malformed input.
  static RunConfig merge(const std::string& file_text, const std::vector<std::string>& assignments);

  bool has(const std::string& key) const;  // set to a non-null value
  bool get_bool(const std::string& key) const;
  std::size_t get_count(const std::string& key) const;
  double get_number(const std::string& key) const;
  std::string get_text(const std::string& key) const;
  std::vector<std::size_t> get_counts(const std::string& key) const;

  // Throws ConfigError("missing seed ...") when no seed was given.
  std::uint64_t seed() const;
  // Seed of a named stage, derived from the global seed.
  std::uint64_t sub_seed(const std::string& stage) const;

  void set(const std::string& key, const nlohmann::json& value);

  // Effective configuration with sorted keys.
  std::string to_json() const;

 private:
  const nlohmann::json& value(const std::string& key, ValueType type) const;
  nlohmann::json values_ = nlohmann::json::object();
};

}  // namespace deepir
