#pragma once

// Pipeline stages behind the command-line tool. Each stage reads its inputs
// from paths in the config, writes its artifacts atomically into `out`, and
// writes the effective config next to them as <command>.config.json.

#include <string>
#include <vector>

#include "deepir/config.hpp"

namespace deepir {

const std::vector<std::string>& pipeline_commands();

// Throws on any error; std::invalid_argument for an unknown command.
void run_command(const std::string& command, const RunConfig& cfg);

}  // namespace deepir
