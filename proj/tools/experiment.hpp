#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beamfl/beam_model.hpp"
#include "beamfl/federation.hpp"
#include "beamfl/partition.hpp"
#include "beamfl/scenario.hpp"

namespace beamfl::cli {

/// Everything one experiment grid needs. Built from a named preset, then
/// overridden key by key from a JSON file.
struct ExperimentConfig {
  std::string preset = "desk";
  ScenarioConfig scenario;
  PartitionSpec partition;
  ArchConfig arch;
  RoundConfig training;
  std::vector<Protocol> protocols{Protocol::kGfl4bs, Protocol::kFedAvg, Protocol::kFlash, Protocol::kCl};
  std::vector<std::uint64_t> seeds{1};
  std::string out;

  /// Aligns the architecture with the scenario (beam count, grid sizes)
  /// and checks every part. Throws ConfigError.
  void finalize();
};

std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
ExperimentConfig make_preset(const std::string& name);
/// Reads "preset" first, then applies the remaining keys on top. Unknown
/// top-level keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& path);
nlohmann::json experiment_to_json(const ExperimentConfig& c);

}  // namespace beamfl::cli
