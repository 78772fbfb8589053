#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "beamfl/beam_model.hpp"
#include "beamfl/scenario.hpp"

namespace beamfl {

enum class GenOptimizer { kAdam, kSgd };

/// Which statistics normalize activations inside the generator forward.
/// Either way the batch statistics of every BN input are what gets matched
/// against the running statistics.
enum class GenNormalization { kBatch, kRunning };

/// Where TX/RX markers may land and the GPS box synthetic positions are
/// clamped to.
struct GenBounds {
  std::size_t tx_cell = 0;
  std::vector<std::size_t> rx_cells;
  std::array<double, 2> gps_min{-60.0, 5.0};
  std::array<double, 2> gps_max{60.0, 50.0};
};

/// Bounds implied by a scenario: TX at the BS cell of the top layer, RX
/// anywhere on the ground layer inside the service area.
GenBounds generator_bounds(const ScenarioConfig& config);

/// Bounds read off real samples: the most common TX cell, every observed
/// RX cell, and the GPS bounding box. Throws InputError without samples.
GenBounds bounds_from_samples(std::span<const Sample* const> samples);

struct GenConfig {
  std::size_t epochs = 500;
  double lr = 0.1;
  GenOptimizer optimizer = GenOptimizer::kAdam;
  GenNormalization normalization = GenNormalization::kBatch;
  double bn_weight = 1.0;
  double hard_weight = 1.0;
  double soft_weight = 1.0;
  double threshold = 0.5;
  std::uint64_t seed = 0;
};

enum class SynthMode { kGenerate, kFill };

/// Optimization state of one generator batch.
///
/// Generate mode: `inputs` hold the continuous latent of all three
/// modalities; the model sees the projected view (GPS clamped, LiDAR
/// binarized with markers embedded); `present` may restrict which
/// modalities exist. Fill mode: `inputs` hold frozen raw
/// data for the modalities in `present`, and `fills` hold the trainable
/// features of the modalities in `missing`.
struct SynthBatch {
  SynthMode mode = SynthMode::kGenerate;
  std::array<Tensor, kNumModalities> inputs;
  std::vector<ModalityMask> present;
  std::vector<ModalityMask> missing;
  std::array<Tensor, kNumModalities> fills;
  std::vector<std::size_t> targets;  // 0-based beam indices
  std::vector<std::size_t> tx_cells;
  std::vector<std::size_t> rx_cells;

  std::size_t size() const { return targets.size(); }
};

/// Terms are reported after weighting, so total is their sum.
struct GenLossReport {
  double bn_term = 0.0;
  double hard_label_term = 0.0;
  double soft_label_term = 0.0;
  double total = 0.0;
  std::vector<double> layer_distances;
};

struct GenLossResult {
  GenLossReport report;
  std::array<Tensor, kNumModalities> input_grads;  // generate mode
  std::array<Tensor, kNumModalities> fill_grads;   // fill mode
};

/// Model batch as the generator feeds it to the networks.
ModalBatch synth_model_batch(const SynthBatch& batch);

/// BN-statistic matching plus hard- and soft-label cross-entropy. The soft
/// targets are the eval model's softmax outputs, held constant. Throws
/// InputError for a batch of one.
GenLossResult gen_loss(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                       const SynthBatch& batch, const GenConfig& config);

/// b(x) = 1 iff x > tau.
std::vector<double> binarize(std::span<const double> x, double tau);
/// Overwrites grid[tx] = -1 and grid[rx] = -2. Throws InputError on
/// out-of-range or equal cells.
void embed_tx_rx(std::span<double> grid, std::size_t tx_cell, std::size_t rx_cell);

/// Called with every projected iterate (iteration 0 is the initial batch).
using GenObserver = std::function<void(std::size_t iteration, const SynthBatch& projected)>;

struct SynthResult {
  std::vector<Sample> samples;  // synthetic, full-modality, labeled with the targets
  GenLossReport initial;
  GenLossReport best;
  GenLossReport last;
  std::size_t best_iteration = 0;
};

/// Zero-shot generation of one batch, one sample per target, covering the
/// modalities in `modalities` (the rest stay absent). Throws
/// DivergenceError on a non-finite loss.
SynthResult synthesize(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                       std::span<const std::size_t> targets, const GenBounds& bounds,
                       const GenConfig& config, const GenObserver& observer = {},
                       ModalityMask modalities = ModalityMask::all());

struct FillResult {
  /// Feature rows aligned with the input batch; rows of samples that keep
  /// the modality are zero. Empty tensors for modalities nobody misses.
  std::array<Tensor, kNumModalities> fills;
  std::vector<ModalityMask> filled;
  GenLossReport initial;
  GenLossReport best;
  bool any() const;
};

/// Optimizes integration-input features for missing modalities of real
/// samples against the true labels. Features start at zero and stay
/// non-negative. Throws InputError when a sample has no modality at all.
FillResult fill_missing_modality(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                                 const ModalBatch& data, std::span<const std::size_t> labels,
                                 const GenConfig& config);

}  // namespace beamfl
