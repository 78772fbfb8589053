#include "beamfl/partition.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>

#include "beamfl/error.hpp"

namespace beamfl {
namespace {

bool role_selected(SplitRole r, std::initializer_list<SplitRole> roles) {
  return roles.size() == 0 || std::find(roles.begin(), roles.end(), r) != roles.end();
}

SplitRole parse_role(const std::string& s) {
  if (s == "train") return SplitRole::kTrain;
  if (s == "val") return SplitRole::kVal;
  if (s == "test") return SplitRole::kTest;
  if (s == "unassigned") return SplitRole::kUnassigned;
  throw InputError("unknown split role " + s);
}

/// The full removal draw (up to the H count) for one vehicle.
std::vector<std::size_t> draw_removals(const LabelHistogram& hist, std::size_t how_many,
                                       double top_prob, std::mt19937_64& rng) {
  std::vector<std::size_t> present;
  for (std::size_t m = 0; m < hist.counts.size(); ++m) {
    if (hist.counts[m] > 0) present.push_back(m);
  }
  std::stable_sort(present.begin(), present.end(), [&](std::size_t a, std::size_t b) {
    return hist.counts[a] > hist.counts[b];
  });
  const std::size_t half = (present.size() + 1) / 2;
  std::vector<std::size_t> top(present.begin(), present.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::size_t> bottom(present.begin() + static_cast<std::ptrdiff_t>(half), present.end());

  std::bernoulli_distribution pick_top(top_prob);
  std::vector<std::size_t> removed;
  while (removed.size() < how_many && (!top.empty() || !bottom.empty())) {
    bool use_top = pick_top(rng);
    if (use_top && top.empty()) use_top = false;
    if (!use_top && bottom.empty()) use_top = true;
    std::vector<std::size_t>& group = use_top ? top : bottom;
    std::uniform_int_distribution<std::size_t> which(0, group.size() - 1);
    const std::size_t k = which(rng);
    removed.push_back(group[k]);
    group.erase(group.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return removed;
}

}  // namespace

const char* role_name(SplitRole r) {
  switch (r) {
    case SplitRole::kUnassigned: return "unassigned";
    case SplitRole::kTrain: return "train";
    case SplitRole::kVal: return "val";
    case SplitRole::kTest: return "test";
  }
  return "?";
}

std::size_t Partition::total_entries() const {
  std::size_t n = 0;
  for (const auto& v : vehicles) n += v.entries.size();
  return n;
}

void to_json(nlohmann::json& j, const Partition& p) {
  j = nlohmann::json::object();
  j["format"] = "beamfl-partition";
  j["version"] = 1;
  auto& vs = j["vehicles"] = nlohmann::json::array();
  for (std::size_t v = 0; v < p.vehicles.size(); ++v) {
    const VehiclePartition& vp = p.vehicles[v];
    nlohmann::json ids = nlohmann::json::array(), masks = nlohmann::json::array(),
                   roles = nlohmann::json::array(), synthetic = nlohmann::json::array();
    for (const PartitionEntry& e : vp.entries) {
      ids.push_back(e.sample_id);
      masks.push_back(e.mask.str());
      roles.push_back(role_name(e.role));
      synthetic.push_back(false);
    }
    vs.push_back({{"vehicle", v},
                  {"sample_ids", ids},
                  {"masks", masks},
                  {"roles", roles},
                  {"synthetic", synthetic},
                  {"removed_labels", vp.removed_labels}});
  }
}

void from_json(const nlohmann::json& j, Partition& p) {
  if (j.value("format", std::string()) != "beamfl-partition") throw LoadError("not a partition manifest");
  p.vehicles.clear();
  for (const auto& jv : j.at("vehicles")) {
    VehiclePartition vp;
    const auto ids = jv.at("sample_ids").get<std::vector<std::size_t>>();
    const auto masks = jv.at("masks").get<std::vector<std::string>>();
    const auto roles = jv.at("roles").get<std::vector<std::string>>();
    if (masks.size() != ids.size() || roles.size() != ids.size()) {
      throw LoadError("partition vehicle arrays differ in length");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      vp.entries.push_back({ids[i], ModalityMask::parse(masks[i]), parse_role(roles[i])});
    }
    vp.removed_labels = jv.value("removed_labels", std::vector<std::size_t>{});
    p.vehicles.push_back(std::move(vp));
  }
}

std::size_t removal_count(ImbalanceLevel level) {
  switch (level) {
    case ImbalanceLevel::kLow: return 6;
    case ImbalanceLevel::kMedium: return 9;
    case ImbalanceLevel::kHigh: return 12;
  }
  return 0;
}

ImbalanceLevel parse_level(const std::string& text) {
  if (text == "L") return ImbalanceLevel::kLow;
  if (text == "M") return ImbalanceLevel::kMedium;
  if (text == "H") return ImbalanceLevel::kHigh;
  throw ConfigError("label imbalance level must be L, M or H, got '" + text + "'");
}

const char* level_name(ImbalanceLevel level) {
  switch (level) {
    case ImbalanceLevel::kLow: return "L";
    case ImbalanceLevel::kMedium: return "M";
    case ImbalanceLevel::kHigh: return "H";
  }
  return "?";
}

void to_json(nlohmann::json& j, const PartitionSpec& s) {
  j = nlohmann::json::object();
  j["split"] = s.split;
  j["label_level"] = s.label_level ? nlohmann::json(level_name(*s.label_level)) : nlohmann::json(nullptr);
  j["mask"] = nullptr;
  if (s.mask) {
    j["mask"] = {{"kind", s.mask->kind == MaskKind::kPartial ? "partial" : "complete"},
                 {"drop_rate", s.mask->drop_rate},
                 {"vehicles", s.mask->vehicles},
                 {"modalities", s.mask->modalities.str()}};
  }
}

void from_json(const nlohmann::json& j, PartitionSpec& s) {
  s.split = j.value("split", s.split);
  // An explicit null clears a level or mask inherited from a preset.
  if (j.contains("label_level")) {
    if (j.at("label_level").is_null()) {
      s.label_level.reset();
    } else {
      s.label_level = parse_level(j.at("label_level").get<std::string>());
    }
  }
  if (j.contains("mask") && j.at("mask").is_null()) s.mask.reset();
  if (j.contains("mask") && !j.at("mask").is_null()) {
    const auto& jm = j.at("mask");
    MaskSpec m;
    const std::string kind = jm.value("kind", std::string("partial"));
    if (kind == "partial") {
      m.kind = MaskKind::kPartial;
    } else if (kind == "complete") {
      m.kind = MaskKind::kComplete;
    } else {
      throw ConfigError("mask kind must be partial or complete");
    }
    m.drop_rate = jm.value("drop_rate", m.drop_rate);
    m.vehicles = jm.value("vehicles", m.vehicles);
    if (jm.contains("modalities")) m.modalities = ModalityMask::parse(jm.at("modalities").get<std::string>());
    s.mask = m;
  }
}

Partition base_partition(const Dataset& dataset) {
  Partition p;
  const auto ids = dataset.ids_by_vehicle();
  p.vehicles.resize(ids.size());
  for (std::size_t v = 0; v < ids.size(); ++v) {
    for (std::size_t id : ids[v]) p.vehicles[v].entries.push_back({id, ModalityMask::all(), SplitRole::kUnassigned});
  }
  return p;
}

LabelHistogram vehicle_histogram(const Partition& p, std::size_t vehicle, const Dataset& dataset,
                                 std::initializer_list<SplitRole> roles) {
  LabelHistogram h(std::vector<std::size_t>(dataset.manifest.num_beams, 0));
  for (const PartitionEntry& e : p.vehicles.at(vehicle).entries) {
    if (!role_selected(e.role, roles)) continue;
    ++h.counts.at(dataset.samples.at(e.sample_id).label);
  }
  return h;
}

std::vector<LabelHistogram> vehicle_histograms(const Partition& p, const Dataset& dataset,
                                               std::initializer_list<SplitRole> roles) {
  std::vector<LabelHistogram> out;
  for (std::size_t v = 0; v < p.num_vehicles(); ++v) out.push_back(vehicle_histogram(p, v, dataset, roles));
  return out;
}

ModalityCensus modality_census(const Partition& p, std::initializer_list<SplitRole> roles) {
  ModalityCensus c;
  c.counts.resize(p.num_vehicles());
  for (std::size_t v = 0; v < p.num_vehicles(); ++v) {
    c.counts[v] = {0, 0, 0};
    for (const PartitionEntry& e : p.vehicles[v].entries) {
      if (!role_selected(e.role, roles)) continue;
      for (Modality q : kAllModalities) {
        if (e.mask.has(q)) ++c.counts[v][index_of(q)];
      }
    }
  }
  return c;
}

Partition make_label_imbalanced_partition(const Partition& base, const Dataset& dataset,
                                          ImbalanceLevel level, std::uint64_t seed,
                                          const LabelSkewOptions& options) {
  const std::size_t vcount = base.num_vehicles();
  if (vcount < 2) throw InputError("label skew needs at least 2 vehicles");
  const std::size_t want = removal_count(level);
  const std::size_t max_draw = removal_count(ImbalanceLevel::kHigh);

  Partition out;
  out.vehicles.resize(vcount);
  // Chain pass: removed samples (own or received) travel to the next
  // vehicle; whatever the last vehicle sheds lands on vehicle 0.
  std::vector<PartitionEntry> carry;
  for (std::size_t v = 0; v < vcount; ++v) {
    const LabelHistogram hist = vehicle_histogram(base, v, dataset);
    const std::size_t distinct = static_cast<std::size_t>(
        std::count_if(hist.counts.begin(), hist.counts.end(), [](std::size_t c) { return c > 0; }));
    if (distinct < want) {
      throw InputError("vehicle " + std::to_string(v) + " has " + std::to_string(distinct) +
                       " distinct labels, fewer than the " + std::to_string(want) + " to remove");
    }
    std::mt19937_64 rng(seed * 1000003ull + v);
    std::vector<std::size_t> drawn = draw_removals(hist, std::max(want, max_draw),
                                                   options.top_group_probability, rng);
    drawn.resize(want);
    out.vehicles[v].removed_labels = drawn;

    std::vector<PartitionEntry> holding = base.vehicles[v].entries;
    holding.insert(holding.end(), carry.begin(), carry.end());
    carry.clear();
    for (const PartitionEntry& e : holding) {
      const std::size_t label = dataset.samples.at(e.sample_id).label;
      if (std::find(drawn.begin(), drawn.end(), label) != drawn.end()) {
        carry.push_back(e);
      } else {
        out.vehicles[v].entries.push_back(e);
      }
    }
  }
  out.vehicles[0].entries.insert(out.vehicles[0].entries.end(), carry.begin(), carry.end());
  for (auto& vp : out.vehicles) {
    std::sort(vp.entries.begin(), vp.entries.end(),
              [](const PartitionEntry& a, const PartitionEntry& b) { return a.sample_id < b.sample_id; });
  }
  return out;
}

Partition make_modality_masked_partition(const Partition& base, const MaskSpec& spec, std::uint64_t seed) {
  Partition out = base;
  const ModalityMask targets = spec.modalities & ModalityMask::only(Modality::kGps).complement();
  std::mt19937_64 rng(seed ^ 0x6d61736bull);
  if (spec.kind == MaskKind::kPartial) {
    if (!(spec.drop_rate >= 0.0 && spec.drop_rate <= 1.0)) throw InputError("drop rate must lie in [0,1]");
    std::bernoulli_distribution drop(spec.drop_rate);
    for (auto& vp : out.vehicles) {
      for (auto& e : vp.entries) {
        if (e.role == SplitRole::kTest) continue;
        for (Modality q : kAllModalities) {
          if (targets.has(q) && drop(rng)) e.mask.set(q, false);
        }
      }
    }
  } else {
    if (spec.vehicles > out.num_vehicles()) {
      throw InputError("cannot mask " + std::to_string(spec.vehicles) + " of " +
                       std::to_string(out.num_vehicles()) + " vehicles");
    }
    std::vector<std::size_t> order(out.num_vehicles());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < spec.vehicles; ++k) {
      for (auto& e : out.vehicles[order[k]].entries) {
        if (e.role == SplitRole::kTest) continue;
        for (Modality q : kAllModalities) {
          if (targets.has(q)) e.mask.set(q, false);
        }
      }
    }
  }
  return out;
}

Partition split_partition(const Partition& p, std::array<double, 3> fractions, std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0.0; }) ||
      std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  Partition out = p;
  for (std::size_t v = 0; v < out.num_vehicles(); ++v) {
    auto& entries = out.vehicles[v].entries;
    std::mt19937_64 rng(seed * 7919ull + v + 17);
    std::shuffle(entries.begin(), entries.end(), rng);
    const auto n = static_cast<double>(entries.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(entries.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      entries[i].role = i < n_train ? SplitRole::kTrain : (i < n_train + n_val ? SplitRole::kVal : SplitRole::kTest);
    }
    std::sort(entries.begin(), entries.end(),
              [](const PartitionEntry& a, const PartitionEntry& b) { return a.sample_id < b.sample_id; });
  }
  return out;
}

Partition build_partition(const Dataset& dataset, const PartitionSpec& spec, std::uint64_t seed) {
  Partition p = base_partition(dataset);
  if (spec.label_level) p = make_label_imbalanced_partition(p, dataset, *spec.label_level, seed);
  p = split_partition(p, spec.split, seed);
  if (spec.mask) p = make_modality_masked_partition(p, *spec.mask, seed);
  return p;
}

}  // namespace beamfl
