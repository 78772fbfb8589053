#include "beamfl/imbalance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "beamfl/error.hpp"

namespace beamfl {

std::size_t LabelHistogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::vector<double> LabelHistogram::ratios() const {
  std::vector<double> r(counts.size(), 0.0);
  const std::size_t t = total();
  if (t == 0) return r;
  for (std::size_t m = 0; m < counts.size(); ++m) {
    r[m] = static_cast<double>(counts[m]) / static_cast<double>(t);
  }
  return r;
}

LabelHistogram global_histogram(std::span<const LabelHistogram> vehicles) {
  LabelHistogram g;
  for (const LabelHistogram& h : vehicles) {
    if (g.counts.empty()) g.counts.assign(h.counts.size(), 0);
    if (h.counts.size() != g.counts.size()) throw InputError("histograms disagree on label count");
    for (std::size_t m = 0; m < h.counts.size(); ++m) g.counts[m] += h.counts[m];
  }
  return g;
}

double average_overlap_rate(std::span<const LabelHistogram> vehicles) {
  const std::size_t v = vehicles.size();
  if (v < 2) throw InputError("overlap rate needs at least 2 vehicles");
  std::vector<std::uint64_t> totals(v);
  for (std::size_t i = 0; i < v; ++i) {
    totals[i] = vehicles[i].total();
    if (totals[i] == 0) throw InputError("vehicle " + std::to_string(i) + " has no samples");
    if (totals[i] >= (std::uint64_t{1} << 32)) throw InputError("histogram totals must stay below 2^32");
    if (vehicles[i].num_labels() != vehicles[0].num_labels()) {
      throw InputError("histograms disagree on label count");
    }
  }
  // min(a/n, b/k) = min(a*k, b*n) / (n*k): integer sums keep identical
  // distributions at exactly 1 and disjoint ones at exactly 0.
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < v; ++i) {
    for (std::size_t j = i + 1; j < v; ++j) {
      std::uint64_t shared = 0;
      for (std::size_t m = 0; m < vehicles[i].counts.size(); ++m) {
        const auto a = static_cast<std::uint64_t>(vehicles[i].counts[m]) * totals[j];
        const auto b = static_cast<std::uint64_t>(vehicles[j].counts[m]) * totals[i];
        shared += std::min(a, b);
      }
      const auto denom = static_cast<std::uint64_t>(totals[i]) * totals[j];
      sum += static_cast<double>(shared) / static_cast<double>(denom);
    }
  }
  const double pairs = static_cast<double>(v) * static_cast<double>(v - 1) / 2.0;
  return sum / pairs;
}

double normalized_entropy(const LabelHistogram& global) {
  const std::size_t m = global.num_labels();
  if (m < 2) throw InputError("entropy needs at least 2 labels");
  if (global.total() == 0) throw InputError("entropy of an empty histogram");
  const auto& c = global.counts;
  if (std::all_of(c.begin(), c.end(), [&](std::size_t x) { return x == c.front(); })) return 1.0;
  double h = 0.0;
  for (double r : global.ratios()) {
    if (r > 0.0) h -= r * std::log(r);
  }
  return std::clamp(h / std::log(static_cast<double>(m)), 0.0, 1.0);
}

std::size_t ModalityCensus::max_count(std::size_t vehicle) const {
  const auto& c = counts.at(vehicle);
  return *std::max_element(c.begin(), c.end());
}

double modality_completeness(const ModalityCensus& census, std::size_t vehicle, Modality q) {
  if (vehicle >= census.num_vehicles()) throw InputError("vehicle index out of range");
  const std::size_t top = census.max_count(vehicle);
  if (top == 0) throw InputError("vehicle " + std::to_string(vehicle) + " has no samples in any modality");
  return static_cast<double>(census.count(vehicle, q)) / static_cast<double>(top);
}

std::vector<std::size_t> sample_shortfall(const LabelHistogram& histogram) {
  if (histogram.total() == 0) throw InputError("shortfall of an empty histogram");
  const auto& c = histogram.counts;
  const std::size_t star = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
  std::vector<std::size_t> out(c.size(), 0);
  for (std::size_t m = 0; m < c.size(); ++m) {
    if (m != star) out[m] = c[star] - c[m];
  }
  return out;
}

}  // namespace beamfl
