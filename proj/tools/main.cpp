#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "beamfl/error.hpp"
#include "commands.hpp"

using namespace beamfl;
using namespace beamfl::cli;

namespace {

ExperimentConfig read_config(const std::string& path, const std::string& preset) {
  ExperimentConfig c = path.empty() ? make_preset(preset.empty() ? "desk" : preset) : load_experiment(path);
  if (!path.empty() && !preset.empty()) throw ConfigError("--config and --preset are exclusive");
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative federated learning for multi-modal beam selection"};
  app.require_subcommand(1);

  std::string config_path, preset, out, dataset;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> protocols, runs;
  bool sequential = false, resume = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--preset", preset, "Named preset instead of a config file");
    sub->add_option("--out", out, "Output directory");
  };

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic scenario dataset");
  add_common(gen);
  gen->add_option("--seed", seeds, "Scenario seed")->expected(1);

  CLI::App* part = app.add_subcommand("partition", "Build a skewed partition and report imbalance");
  add_common(part);
  part->add_option("--seed", seeds, "Partition seed")->expected(1);
  part->add_option("--dataset", dataset, "Dataset directory (generated when omitted)");

  CLI::App* train = app.add_subcommand("train", "Run protocols over seeds");
  add_common(train);
  train->add_option("--seed", seeds, "Seeds (repeatable; overrides the config)");
  train->add_option("--protocol", protocols, "gfl4bs, fedavg, flash or cl (repeatable)");
  train->add_option("--dataset", dataset, "Dataset directory (generated per seed when omitted)");
  train->add_flag("--sequential", sequential, "Single-threaded, fully deterministic execution");
  train->add_flag("--resume", resume, "Continue interrupted cells from their last round");

  CLI::App* report = app.add_subcommand("report", "Merge finished runs into comparison tables");
  report->add_option("runs", runs, "Run directories")->required();
  report->add_option("--out", out, "Where to write report.csv and series.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      GenOptions o{read_config(config_path, preset), std::nullopt, out};
      if (!seeds.empty()) o.seed = seeds.front();
      return cmd_gen(o);
    }
    if (*part) {
      PartitionOptions o{read_config(config_path, preset), std::nullopt, dataset, out};
      if (!seeds.empty()) o.seed = seeds.front();
      return cmd_partition(o);
    }
    if (*train) {
      TrainOptionsCli o;
      o.config = read_config(config_path, preset);
      o.seeds = seeds;
      for (const auto& p : protocols) o.protocols.push_back(parse_protocol(p));
      o.dataset = dataset;
      o.out = out;
      o.sequential = sequential;
      o.resume = resume;
      return cmd_train(o);
    }
    return cmd_report(ReportOptions{runs, out});
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
}
