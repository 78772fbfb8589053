#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "beamfl/beam_model.hpp"

namespace beamfl {

/// Per-label sample counts of one vehicle (or of the whole fleet).
struct LabelHistogram {
  std::vector<std::size_t> counts;

  LabelHistogram() = default;
  explicit LabelHistogram(std::vector<std::size_t> c) : counts(std::move(c)) {}

  std::size_t num_labels() const { return counts.size(); }
  std::size_t total() const;
  /// counts / total; all zeros when the histogram is empty.
  std::vector<double> ratios() const;
};

/// Elementwise sum of vehicle histograms.
LabelHistogram global_histogram(std::span<const LabelHistogram> vehicles);

/// Average pairwise overlap of normalized label distributions:
/// 2/(V(V-1)) sum_{i<j} sum_m min(r_i[m], r_j[m]).
/// Throws InputError for fewer than 2 vehicles or an empty vehicle.
double average_overlap_rate(std::span<const LabelHistogram> vehicles);

/// Shannon entropy of the global label ratios divided by log(M), with
/// 0 log 0 = 0. Throws InputError when M < 2 or the histogram is empty.
double normalized_entropy(const LabelHistogram& global);

/// Per-vehicle sample counts per modality.
struct ModalityCensus {
  std::vector<std::array<std::size_t, kNumModalities>> counts;

  std::size_t num_vehicles() const { return counts.size(); }
  std::size_t count(std::size_t vehicle, Modality q) const { return counts.at(vehicle)[index_of(q)]; }
  /// Largest per-modality count of the vehicle.
  std::size_t max_count(std::size_t vehicle) const;
};

/// N_v^Q / max_Q' N_v^Q'. Throws InputError when the vehicle has no samples.
double modality_completeness(const ModalityCensus& census, std::size_t vehicle, Modality q);

/// For the most frequent label c* (lowest index on ties) the shortfall is
/// 0; every other label m gets N* - N^m. Throws InputError when empty.
std::vector<std::size_t> sample_shortfall(const LabelHistogram& histogram);

}  // namespace beamfl
