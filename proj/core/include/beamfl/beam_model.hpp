#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beamfl/network.hpp"
#include "beamfl/tensor.hpp"

namespace beamfl {

enum class Modality : std::uint8_t { kGps = 0, kRgb = 1, kLidar = 2 };

inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {
    Modality::kGps, Modality::kRgb, Modality::kLidar};

inline constexpr std::size_t index_of(Modality q) { return static_cast<std::size_t>(q); }
const char* modality_name(Modality q);

/// Subset of {GPS, RGB, LiDAR}.
class ModalityMask {
 public:
  constexpr ModalityMask() = default;
  static constexpr ModalityMask all() { return ModalityMask(0b111); }
  static constexpr ModalityMask none() { return ModalityMask(0); }
  static constexpr ModalityMask only(Modality q) {
    return ModalityMask(static_cast<std::uint8_t>(1u << index_of(q)));
  }

  constexpr bool has(Modality q) const { return (bits_ >> index_of(q)) & 1u; }
  constexpr void set(Modality q, bool on) {
    const auto bit = static_cast<std::uint8_t>(1u << index_of(q));
    bits_ = on ? static_cast<std::uint8_t>(bits_ | bit) : static_cast<std::uint8_t>(bits_ & ~bit);
  }
  constexpr std::size_t count() const { return (bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool full() const { return bits_ == 0b111; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr ModalityMask operator|(ModalityMask o) const {
    return ModalityMask(static_cast<std::uint8_t>(bits_ | o.bits_));
  }
  constexpr ModalityMask operator&(ModalityMask o) const {
    return ModalityMask(static_cast<std::uint8_t>(bits_ & o.bits_));
  }
  constexpr ModalityMask complement() const {
    return ModalityMask(static_cast<std::uint8_t>(~bits_ & 0b111));
  }

  /// "GRL" style: each present modality contributes its letter, absent "-".
  std::string str() const;
  /// Inverse of str(); throws InputError on malformed text.
  static ModalityMask parse(std::string_view text);

  friend constexpr bool operator==(ModalityMask, ModalityMask) = default;

 private:
  explicit constexpr ModalityMask(std::uint8_t bits) : bits_(bits) {}
  std::uint8_t bits_ = 0;
};

enum class BranchId : std::uint8_t { kGps = 0, kRgb = 1, kLidar = 2, kIntegration = 3 };
inline constexpr std::size_t kNumBranches = 4;
inline constexpr std::array<BranchId, kNumBranches> kAllBranches = {
    BranchId::kGps, BranchId::kRgb, BranchId::kLidar, BranchId::kIntegration};

inline constexpr std::size_t index_of(BranchId b) { return static_cast<std::size_t>(b); }
inline constexpr BranchId branch_of(Modality q) { return static_cast<BranchId>(index_of(q)); }
const char* branch_name(BranchId b);

/// Dense -> BN -> ReLU per hidden width, then Dense -> BN -> ReLU to the
/// feature width.
struct ExtractorConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t feature_dim = 0;
};

struct ArchConfig {
  ExtractorConfig gps{2, {16}, 8};
  ExtractorConfig rgb{64, {48}, 16};
  ExtractorConfig lidar{128, {48}, 16};
  /// Dense -> BN -> ReLU per width, then a plain Dense to num_beams logits.
  std::vector<std::size_t> integration_hidden{64};
  std::size_t num_beams = 16;
  std::uint64_t seed = 0;
  BNOptions bn;

  const ExtractorConfig& extractor(Modality q) const;
  ExtractorConfig& extractor(Modality q);
  /// Concatenation width, GPS then RGB then LiDAR.
  std::size_t fused_dim() const;
  std::size_t feature_offset(Modality q) const;
  void validate() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&);
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

std::vector<LayerSpec> extractor_layer_specs(const ExtractorConfig& cfg);
std::vector<LayerSpec> integration_layer_specs(std::size_t fused_dim,
                                               std::span<const std::size_t> hidden,
                                               std::size_t num_beams);

/// Closed-form trainable/state parameter counts straight from the config.
struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t state = 0;
};
ParamCounts expected_counts(const ArchConfig& arch, BranchId branch);

/// A batch of multi-modal samples. Rows of `inputs[q]` belonging to
/// samples without modality q are never read. `fills[q]` (when non-empty)
/// supplies substitute features for samples flagged in `filled`.
struct ModalBatch {
  std::array<Tensor, kNumModalities> inputs;
  std::vector<ModalityMask> present;
  std::array<Tensor, kNumModalities> fills;
  std::vector<ModalityMask> filled;

  std::size_t size() const { return present.size(); }
};

struct ModelTrace {
  std::array<std::vector<std::size_t>, kNumModalities> rows;
  std::array<std::optional<ForwardTrace>, kNumModalities> extractor;
  ForwardTrace integration;
  Tensor fused;
};

struct ModelForward {
  Tensor logits;
  ModelTrace trace;
  /// Batch statistics per branch (empty for branches that did not run).
  std::array<std::vector<BatchStats>, kNumBranches> stats;
};

struct ModelGrads {
  std::array<std::optional<GradientSet>, kNumBranches> branches;
  /// Full-batch input gradients (zero rows for samples that skipped the
  /// extractor); only filled when requested.
  std::array<Tensor, kNumModalities> inputs;
  /// Gradient with respect to the fused feature vector.
  Tensor fused;
};

using BranchStatGrads = std::array<std::vector<StatGrad>, kNumBranches>;

struct Prediction {
  Tensor logits;
  std::vector<std::size_t> beams;  // 0-based, ties to the lowest index
};

/// Concatenates per-modality features in the order GPS, RGB, LiDAR.
/// `features[q]` holds one row per sample; a sample whose mask lacks q gets
/// a zero block of that modality's width.
Tensor fuse_features(const ArchConfig& arch, const std::array<const Tensor*, kNumModalities>& features,
                     std::span<const ModalityMask> available);

struct BranchParams;

class MultiModalNet {
 public:
  MultiModalNet() = default;
  static MultiModalNet build(const ArchConfig& arch);

  const ArchConfig& arch() const { return arch_; }
  Network& branch(BranchId b) { return branches_[index_of(b)]; }
  const Network& branch(BranchId b) const { return branches_[index_of(b)]; }

  ModelForward run(const ModalBatch& batch, Mode mode) const;
  ModelForward forward(const ModalBatch& batch, Mode mode);
  void commit_running_stats(const ModelForward& fwd);

  ModelGrads backward(const ModelForward& fwd, const Tensor& grad_logits,
                      const BranchStatGrads& stat_grads = {},
                      bool want_input_grads = false) const;

  Prediction predict(const ModalBatch& batch, Mode mode = Mode::kEval) const;

  std::size_t trainable_count() const;
  std::size_t state_count() const;

  friend bool operator==(const MultiModalNet&, const MultiModalNet&) = default;
  friend MultiModalNet merge_branches(const ArchConfig& arch, std::span<const BranchParams> parts);

 private:
  ArchConfig arch_;
  std::array<Network, kNumBranches> branches_;
};

/// One independently transferable branch.
struct BranchParams {
  BranchId id = BranchId::kIntegration;
  Network net;

  std::size_t feature_dim() const { return net.output_dim(); }
  friend bool operator==(const BranchParams&, const BranchParams&) = default;
};

std::array<BranchParams, kNumBranches> split_branches(const MultiModalNet& net);
/// Throws ProtocolError when a branch is missing, duplicated, or shaped
/// differently from `arch`.
MultiModalNet merge_branches(const ArchConfig& arch, std::span<const BranchParams> parts);

}  // namespace beamfl
