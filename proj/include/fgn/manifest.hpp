#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/io.hpp"

namespace fgn {

// Record of one CLI run.  The canonical hash covers everything that
// determines the outputs (command, arguments, resolved config, master seed,
// tool version, input content hashes) and deliberately excludes wall time
// and output hashes: outputs embed this hash, so two runs of the same
// command agree on it exactly when they were given the same job.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  uint64_t master_seed = 0;
  std::string tool_version = kVersion;
  std::vector<std::pair<std::string, std::string>> inputs;   // name -> content hash
  std::vector<std::pair<std::string, std::string>> outputs;  // name -> content hash
  double wall_time_s = 0.0;

  void add_input(const std::string& name, const std::filesystem::path& path) {
    inputs.emplace_back(name, hex64(fnv1a64(read_file_bytes(path))));
  }
  void add_output(const std::string& name, const std::filesystem::path& path) {
    outputs.emplace_back(name, hex64(fnv1a64(read_file_bytes(path))));
  }

  json canonical_json() const {
    json in = json::array();
    for (const auto& [n, h] : inputs) in.push_back({{"name", n}, {"hash", h}});
    return {{"command", command},         {"argv", argv},
            {"config", config},           {"master_seed", master_seed},
            {"tool_version", tool_version}, {"inputs", std::move(in)}};
  }

  std::string hash() const { return hex64(fnv1a64(canonical_json().dump())); }

  json to_json() const {
    json j = canonical_json();
    json out = json::array();
    for (const auto& [n, h] : outputs) out.push_back({{"name", n}, {"hash", h}});
    j["outputs"] = std::move(out);
    j["wall_time_s"] = wall_time_s;
    j["manifest_hash"] = hash();
    return j;
  }

  void save(const std::filesystem::path& path) const {
    write_file_bytes(path, to_json().dump(1) + "\n");
  }
};

}  // namespace fgn
