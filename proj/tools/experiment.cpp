#include "experiment.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "beamfl/error.hpp"

namespace beamfl::cli {

namespace {

// Desk scale: small enough that a protocol run takes well under a minute.
ExperimentConfig desk() {
  ExperimentConfig c;
  c.preset = "desk";
  c.partition.label_level = ImbalanceLevel::kHigh;
  c.training.rounds = 40;
  c.training.local_epochs = 5;
  c.training.batch_size = 32;
  c.training.learning_rate = 3e-3;
  c.training.gen.epochs = 100;
  c.training.direction = TriggerDirection::kDeclineBelow;
  c.training.max_generations = 8;
  c.seeds = {1, 2, 3};
  return c;
}

}  // namespace

std::vector<std::string> preset_names() { return {"desk", "desk-m34", "desk-modality", "full"}; }

ExperimentConfig make_preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "desk-m34") {
    ExperimentConfig c = desk();
    c.preset = name;
    c.scenario.num_beams = 34;
    return c;
  }
  if (name == "desk-modality") {
    ExperimentConfig c = desk();
    c.preset = name;
    c.partition.label_level.reset();
    c.partition.mask = MaskSpec{};
    c.training.generate_labels = false;
    return c;
  }
  if (name == "full") {
    // Library defaults: full-scale training settings.
    ExperimentConfig c;
    c.preset = name;
    c.scenario.num_beams = 34;
    c.partition.label_level = ImbalanceLevel::kHigh;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

void ExperimentConfig::finalize() {
  arch.num_beams = scenario.num_beams;
  arch.rgb.input_dim = scenario.rgb_size();
  arch.lidar.input_dim = scenario.lidar_size();
  scenario.validate();
  arch.validate();
  training.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (protocols.empty()) throw ConfigError("at least one protocol is required");
  std::set<Protocol> seen(protocols.begin(), protocols.end());
  if (seen.size() != protocols.size()) throw ConfigError("protocol listed twice");
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {"preset", "scenario", "partition", "arch",
                                              "training", "protocols", "seeds", "out"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("unknown config key '" + item.key() + "'");
  }
  try {
    ExperimentConfig c = make_preset(j.value("preset", std::string("desk")));
    if (j.contains("scenario")) from_json(j.at("scenario"), c.scenario);
    if (j.contains("partition")) from_json(j.at("partition"), c.partition);
    if (j.contains("arch")) from_json(j.at("arch"), c.arch);
    if (j.contains("training")) from_json(j.at("training"), c.training);
    if (j.contains("protocols")) {
      c.protocols.clear();
      for (const auto& p : j.at("protocols")) c.protocols.push_back(parse_protocol(p.get<std::string>()));
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.out = j.value("out", c.out);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  nlohmann::json protocols = nlohmann::json::array();
  for (Protocol p : c.protocols) protocols.push_back(protocol_name(p));
  nlohmann::json j = {{"preset", c.preset},    {"scenario", c.scenario}, {"partition", c.partition},
                      {"arch", c.arch},        {"training", c.training}, {"protocols", protocols},
                      {"seeds", c.seeds}};
  if (!c.out.empty()) j["out"] = c.out;
  return j;
}

}  // namespace beamfl::cli
