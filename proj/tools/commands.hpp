#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "experiment.hpp"

namespace beamfl::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitDiverged = 2;

struct GenOptions {
  ExperimentConfig config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct PartitionOptions {
  ExperimentConfig config;
  std::optional<std::uint64_t> seed;
  std::string dataset;  // generate from the config when empty
  std::string out;
};

struct TrainOptionsCli {
  ExperimentConfig config;
  std::vector<std::uint64_t> seeds;  // overrides the config when non-empty
  std::vector<Protocol> protocols;   // likewise
  std::string dataset;
  std::string out;
  bool sequential = false;
  bool resume = false;
};

struct ReportOptions {
  std::vector<std::string> runs;
  std::string out;
};

int cmd_gen(const GenOptions& o);
int cmd_partition(const PartitionOptions& o);
int cmd_train(const TrainOptionsCli& o);
int cmd_report(const ReportOptions& o);

/// $BEAMFL_OUT or "runs", joined with `leaf`.
std::string default_out(const std::string& leaf);

}  // namespace beamfl::cli
