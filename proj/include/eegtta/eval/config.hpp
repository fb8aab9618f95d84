#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "eegtta/data/synth.hpp"
#include "eegtta/eval/protocol.hpp"

namespace eegtta {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One JSON document: {"seed", "mode", "workers", "checkpoint_dir", "allow_pretrain",
// "export_features", "adapt": {...}, "pretrain": {...}, "network": {...}, "synth": {...}}.
// Every section and key is optional; unknown keys are rejected.
struct RunConfig {
  ProtocolConfig protocol{};
  SynthConfig synth{};
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::ordered_json to_json(const RunConfig& cfg);

// "source-only" selects SourceOnly; otherwise a variant name (full | no-bn | no-mem | no-pl).
void set_mode(ProtocolConfig& cfg, const std::string& mode);

}  // namespace eegtta
