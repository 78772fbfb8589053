#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beamfl/beam_model.hpp"
#include "beamfl/generator.hpp"
#include "beamfl/partition.hpp"
#include "beamfl/scenario.hpp"

namespace beamfl {

enum class Protocol { kGfl4bs, kFedAvg, kFlash, kCl };
inline constexpr std::array<Protocol, 4> kAllProtocols = {Protocol::kGfl4bs, Protocol::kFedAvg,
                                                         Protocol::kFlash, Protocol::kCl};
const char* protocol_name(Protocol p);
/// Accepts "gfl4bs", "fedavg", "flash", "cl" (any case).
Protocol parse_protocol(const std::string& text);

/// kDeclineAbove triggers when previous - current > gamma.
enum class TriggerDirection { kDeclineAbove, kDeclineBelow };

struct RoundConfig {
  std::size_t rounds = 500;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 128;
  double learning_rate = 1e-4;

  double gamma = 0.01;
  TriggerDirection direction = TriggerDirection::kDeclineAbove;
  bool generate_labels = true;
  bool fill_modalities = true;
  /// Upper bound on trigger events per run; 0 disables generation.
  std::size_t max_generations = 4;
  /// Synthetic samples per vehicle are capped at this multiple of its
  /// real training set.
  double synth_budget = 2.0;
  std::size_t gen_batch = 128;
  GenConfig gen;

  /// Rounds for the FedAvg run that produces the evaluation model; 0 means
  /// the same as `rounds`.
  std::size_t eval_rounds = 0;
  std::size_t users_per_group = 4;
  std::uint64_t seed = 0;
  bool parallel = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const RoundConfig& c);
void from_json(const nlohmann::json& j, RoundConfig& c);

/// Optional features for the missing modalities of one sample.
using FillFeatures = std::array<std::vector<double>, kNumModalities>;

/// One row of a local training set.
struct LocalItem {
  const Sample* sample = nullptr;
  ModalityMask mask = ModalityMask::all();
  const FillFeatures* fill = nullptr;
};

struct VehicleState {
  std::size_t id = 0;
  ModalityMask sensors = ModalityMask::all();
  std::vector<PartitionEntry> train;
  std::vector<PartitionEntry> val;
  std::vector<Sample> synthetic;
  /// Parallel to `train`; empty arrays where nothing was filled.
  std::vector<FillFeatures> fills;
  /// Branches the vehicle currently holds (always includes integration).
  std::array<bool, kNumBranches> holds{};

  bool holds_branch(BranchId b) const { return holds[index_of(b)]; }
};

/// Per-vehicle sensor configuration and splits derived from a partition.
std::vector<VehicleState> make_vehicles(const Partition& partition, Protocol protocol);

struct TransferRecord {
  std::size_t round = 0;
  std::size_t vehicle = 0;
  std::size_t params_down = 0;
  std::size_t params_up = 0;
  friend bool operator==(const TransferRecord&, const TransferRecord&) = default;
};

struct CommLedger {
  std::vector<TransferRecord> entries;

  void add(std::size_t round, std::size_t vehicle, std::size_t down, std::size_t up);
  std::size_t total_down() const;
  std::size_t total_up() const;
  std::size_t total() const { return total_down() + total_up(); }
  std::size_t round_down(std::size_t round) const;
  std::size_t round_up(std::size_t round) const;
  /// Ratio of this ledger's total volume to the reference ledger's.
  double overhead_ratio(const CommLedger& reference) const;

  void write_csv(std::ostream& out) const;
  friend bool operator==(const CommLedger&, const CommLedger&) = default;
};

struct RoundMetrics {
  std::size_t round = 0;
  double global_acc = 0.0;
  double mean_local_acc = 0.0;
  double local_var = 0.0;
  /// Loss decline at the start of the round; NaN when undefined.
  double delta_loss = 0.0;
  bool triggered = false;
  std::size_t params_up = 0;
  std::size_t params_down = 0;

  friend bool operator==(const RoundMetrics&, const RoundMetrics&) = default;
};

struct TrainReport {
  Protocol protocol = Protocol::kGfl4bs;
  std::vector<RoundMetrics> rounds;
  std::vector<double> loss_history;
  std::vector<double> local_acc;  // final, per vehicle
  double global_acc = 0.0;
  double local_var = 0.0;
  double sum_rate_ratio = 0.0;  // NaN without channel data
  std::size_t generations = 0;
  /// FLASH: extractor chosen after each round's aggregation.
  std::vector<Modality> flash_selected;
  bool diverged = false;
  std::string divergence;
};

/// Header: round,global_acc,mean_local_acc,local_var,dL,triggered,params_up,params_down
void write_metrics_csv(std::ostream& out, std::span<const RoundMetrics> rows);
std::vector<RoundMetrics> read_metrics_csv(std::istream& in);

/// previous - current over the last two entries; nullopt with fewer.
std::optional<double> loss_decline(std::span<const double> history);
bool generation_trigger(std::span<const double> history, double gamma,
                        TriggerDirection direction = TriggerDirection::kDeclineAbove);

struct Upload {
  std::size_t vehicle = 0;
  std::vector<BranchParams> branches;
};

/// Uniform branch-wise average: every branch over the uploads that carry it,
/// in upload order. Branches nobody uploaded keep `previous` and get a
/// warning appended.
MultiModalNet aggregate(const MultiModalNet& previous, std::span<const Upload> uploads,
                        std::vector<std::string>* warnings = nullptr);

/// Batch of local items; rows without a modality read zeros unless a fill
/// exists.
ModalBatch make_local_batch(const ArchConfig& arch, std::span<const LocalItem> items);

/// E epochs of mini-batch Adam (fresh state) over `items`, updating only the
/// branches flagged in `trainable`. Shuffling is seeded by `seed`. Returns
/// the mean training loss of the last epoch; throws DivergenceError on a
/// non-finite loss. Batches of a single row are skipped.
double local_update(MultiModalNet& model, std::span<const LocalItem> items,
                    const std::array<bool, kNumBranches>& trainable, std::size_t epochs,
                    std::size_t batch_size, double learning_rate, std::uint64_t seed);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};
EvalResult evaluate(const MultiModalNet& model, std::span<const LocalItem> items);

/// Everything needed to continue a run after round `completed_rounds`.
struct TrainingState {
  std::size_t completed_rounds = 0;
  MultiModalNet global;
  std::vector<MultiModalNet> local_models;  // FLASH only
  std::vector<std::vector<Sample>> synthetic;
  std::vector<std::vector<FillFeatures>> fills;
  std::vector<double> loss_history;
  std::size_t generations = 0;
  std::vector<RoundMetrics> rounds;
  CommLedger ledger;
  /// FLASH: extractor chosen after the last aggregation.
  std::optional<Modality> flash_selected;
};

struct TrainResult {
  TrainReport report;
  CommLedger ledger;
  MultiModalNet model;
};

struct TrainOptions {
  /// Evaluation model for the soft-label term; trained with FedAvg on the
  /// same partition when generation may run and none is given.
  const MultiModalNet* eval_model = nullptr;
  const TrainingState* resume = nullptr;
  /// Called after every completed round.
  std::function<void(const TrainingState&)> on_round;
  /// Stop (as if interrupted) once this many rounds are complete.
  std::optional<std::size_t> stop_after;
};

/// Runs one protocol on a partitioned dataset. Divergence ends the run
/// early with `report.diverged` set.
TrainResult run_training(const Dataset& dataset, const Partition& partition, Protocol protocol,
                         const ArchConfig& arch, const RoundConfig& config,
                         const TrainOptions& options = {});

TrainResult run_benchmark_fedavg(const Dataset& dataset, const Partition& partition,
                                 const ArchConfig& arch, const RoundConfig& config);
TrainResult run_benchmark_flash(const Dataset& dataset, const Partition& partition,
                                const ArchConfig& arch, const RoundConfig& config);
TrainResult run_benchmark_cl(const Dataset& dataset, const Partition& partition,
                             const ArchConfig& arch, const RoundConfig& config);

/// Closed-form per-round transfer volume of one vehicle. `flash_branch` is
/// the extractor FLASH sends down after round 1.
struct TransferPrediction {
  std::size_t down = 0;
  std::size_t up = 0;
};
TransferPrediction predicted_transfer(const ArchConfig& arch, Protocol protocol, ModalityMask sensors,
                                      std::size_t round, std::optional<Modality> flash_branch = {});

/// Raw-data volume of centralized learning: every present input value plus
/// one label per training sample.
std::size_t raw_upload_volume(const ArchConfig& arch, std::span<const LocalItem> items);

/// Population variance.
double population_variance(std::span<const double> values);

}  // namespace beamfl
