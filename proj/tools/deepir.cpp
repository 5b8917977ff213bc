// deepir <command> [--config FILE] [--set key=value ...] [--seed N] [--out DIR]

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "deepir/binary_io.hpp"
#include "deepir/config.hpp"
#include "deepir/pipeline.hpp"

namespace {

std::string key_table() {
  std::string out = "config keys (defaults):\n";
  for (const auto& k : deepir::config_keys()) {
    out += "  " + k.name + " = " + k.fallback.dump();
    if (!k.help.empty()) out += "    # " + k.help;
    out += "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-level image retrieval pipeline"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  std::string config_file;
  std::vector<std::string> assignments;
  std::string seed, out;
  bool list_keys = false;
  app.add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", assignments, "override, key=value (repeatable)");
  app.add_option("--seed", seed, "shorthand for --set seed=N");
  app.add_option("--out", out, "shorthand for --set out=DIR");
  app.add_flag("--list-keys", list_keys, "print every config key with its default");
  for (const auto& name : deepir::pipeline_commands()) app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (list_keys) {
    std::cout << key_table();
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }
  spdlog::set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (!seed.empty()) assignments.insert(assignments.begin(), "seed=" + seed);
    if (!out.empty()) assignments.insert(assignments.begin(), "out=" + out);
    const std::string text = config_file.empty() ? std::string() : deepir::read_file(config_file);
    const deepir::RunConfig cfg = deepir::RunConfig::merge(text, assignments);
    deepir::run_command(command, cfg);
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", command, e.what());
    return 1;
  }
  return 0;
}
