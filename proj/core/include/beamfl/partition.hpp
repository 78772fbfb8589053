#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beamfl/imbalance.hpp"
#include "beamfl/scenario.hpp"

namespace beamfl {

enum class SplitRole : std::uint8_t { kUnassigned, kTrain, kVal, kTest };
const char* role_name(SplitRole r);

struct PartitionEntry {
  std::size_t sample_id = 0;
  ModalityMask mask = ModalityMask::all();
  SplitRole role = SplitRole::kUnassigned;

  friend bool operator==(const PartitionEntry&, const PartitionEntry&) = default;
};

struct VehiclePartition {
  std::vector<PartitionEntry> entries;
  /// Labels removed from this vehicle by the label-skew builder, in draw order.
  std::vector<std::size_t> removed_labels;

  friend bool operator==(const VehiclePartition&, const VehiclePartition&) = default;
};

struct Partition {
  std::vector<VehiclePartition> vehicles;

  std::size_t num_vehicles() const { return vehicles.size(); }
  std::size_t total_entries() const;
  friend bool operator==(const Partition&, const Partition&) = default;
};

void to_json(nlohmann::json& j, const Partition& p);
void from_json(const nlohmann::json& j, Partition& p);

enum class ImbalanceLevel { kLow, kMedium, kHigh };
/// Number of labels removed per vehicle: 6, 9, 12.
std::size_t removal_count(ImbalanceLevel level);
ImbalanceLevel parse_level(const std::string& text);  // "L", "M", "H"
const char* level_name(ImbalanceLevel level);

struct LabelSkewOptions {
  /// Probability that a removed label comes from the top-50% (by volume)
  /// group; the bottom group gets the rest.
  double top_group_probability = 0.7;
};

enum class MaskKind { kPartial, kComplete };

struct MaskSpec {
  MaskKind kind = MaskKind::kPartial;
  double drop_rate = 0.8;       // partial: per-sample drop probability
  std::size_t vehicles = 2;     // complete: how many vehicles lose the modality
  ModalityMask modalities = ModalityMask::only(Modality::kRgb) | ModalityMask::only(Modality::kLidar);
};

struct PartitionSpec {
  std::optional<ImbalanceLevel> label_level;
  std::optional<MaskSpec> mask;
  std::array<double, 3> split{0.8, 0.1, 0.1};  // train / val / test per vehicle
};

void to_json(nlohmann::json& j, const PartitionSpec& s);
void from_json(const nlohmann::json& j, PartitionSpec& s);

/// One vehicle per dataset vehicle, all samples unassigned and complete.
Partition base_partition(const Dataset& dataset);

/// Histogram of a vehicle's entries whose role is in `roles` (all roles when
/// empty).
LabelHistogram vehicle_histogram(const Partition& p, std::size_t vehicle, const Dataset& dataset,
                                 std::initializer_list<SplitRole> roles = {});
std::vector<LabelHistogram> vehicle_histograms(const Partition& p, const Dataset& dataset,
                                               std::initializer_list<SplitRole> roles = {});
ModalityCensus modality_census(const Partition& p, std::initializer_list<SplitRole> roles = {});

/// Per vehicle: rank present labels by volume, split into top/bottom halves
/// and draw removal labels group-wise (top with `top_group_probability`).
/// Vehicles are then visited in index order; each one passes every sample it
/// holds with a removed label (its own or received) to vehicle v+1, and the
/// last vehicle's removals end on vehicle 0. Draws depend only on
/// (base, seed), so H removes a superset of M, which removes a superset of
/// L. Throws InputError when a vehicle has fewer distinct labels than the
/// removal count.
Partition make_label_imbalanced_partition(const Partition& base, const Dataset& dataset,
                                          ImbalanceLevel level, std::uint64_t seed,
                                          const LabelSkewOptions& options = {});

/// Masks only the modalities in spec.modalities (GPS is never touched) and
/// never entries already assigned to the test role.
Partition make_modality_masked_partition(const Partition& base, const MaskSpec& spec,
                                         std::uint64_t seed);

/// Shuffles each vehicle's entries and assigns train/val/test by the given
/// fractions (rounded; the remainder is test).
Partition split_partition(const Partition& p, std::array<double, 3> fractions, std::uint64_t seed);

/// Full pipeline: label skew, then split, then modality masks on the
/// train/val entries.
Partition build_partition(const Dataset& dataset, const PartitionSpec& spec, std::uint64_t seed);

}  // namespace beamfl
