#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "beamfl/error.hpp"
#include "beamfl/imbalance.hpp"
#include "beamfl/partition.hpp"
#include "beamfl/scenario.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace beamfl;

namespace {

std::vector<LabelHistogram> hists(std::vector<std::vector<std::size_t>> c) {
  std::vector<LabelHistogram> out;
  for (auto& v : c) out.emplace_back(std::move(v));
  return out;
}

const Scenario& fleet() {
  static const Scenario s = [] {
    return generate_scenario(ScenarioConfig{}, 21);
  }();
  return s;
}

}  // namespace

TEST_CASE("overlap rate examples") {
  CHECK(average_overlap_rate(hists({{3, 1}, {6, 2}, {9, 3}})) == doctest::Approx(1.0));
  CHECK(average_overlap_rate(hists({{4, 0}, {0, 4}})) == 0.0);
  // (1,0) (0.5,0.5) (0,1): pairs give 0.5, 0, 0.5.
  CHECK(average_overlap_rate(hists({{2, 0}, {1, 1}, {0, 7}})) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(average_overlap_rate(hists({{1, 1}})), InputError);
  CHECK_THROWS_AS(average_overlap_rate(hists({{1, 1}, {0, 0}})), InputError);
}

TEST_CASE("entropy examples") {
  CHECK(normalized_entropy(LabelHistogram({5, 5, 5, 5})) == doctest::Approx(1.0));
  CHECK(normalized_entropy(LabelHistogram({0, 9, 0})) == 0.0);
  CHECK(normalized_entropy(LabelHistogram({3, 3, 0, 0})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(normalized_entropy(LabelHistogram({4})), InputError);
  CHECK_THROWS_AS(normalized_entropy(LabelHistogram({0, 0})), InputError);
}

TEST_CASE("completeness examples") {
  ModalityCensus c;
  c.counts = {{100, 100, 100}, {100, 100, 20}, {50, 0, 50}, {0, 0, 0}};
  CHECK(modality_completeness(c, 0, Modality::kLidar) == 1.0);
  CHECK(modality_completeness(c, 1, Modality::kLidar) == doctest::Approx(0.2));
  CHECK(modality_completeness(c, 2, Modality::kRgb) == 0.0);
  CHECK_THROWS_AS(modality_completeness(c, 3, Modality::kGps), InputError);
}

TEST_CASE("shortfall examples") {
  CHECK(sample_shortfall(LabelHistogram({5, 3, 2})) == std::vector<std::size_t>{0, 2, 3});
  CHECK(sample_shortfall(LabelHistogram({4, 4, 4})) == std::vector<std::size_t>{0, 0, 0});
  CHECK(sample_shortfall(LabelHistogram({4, 0})) == std::vector<std::size_t>{0, 4});
  CHECK(sample_shortfall(LabelHistogram({1, 6, 6})) == std::vector<std::size_t>{5, 0, 0});
  CHECK_THROWS_AS(sample_shortfall(LabelHistogram({0, 0})), InputError);
}

TEST_CASE("metrics on random histograms agree with oracles and stay in range") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> cnt(0, 20), vs(2, 6), ms(2, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t v = vs(rng), m = ms(rng);
    std::vector<std::vector<std::size_t>> raw(v, std::vector<std::size_t>(m));
    for (auto& h : raw) {
      for (auto& c : h) c = cnt(rng);
      h[trial % m] += 1;
    }
    const auto h = hists(raw);
    const double z = average_overlap_rate(h);
    CHECK(z >= 0.0);
    CHECK(z <= 1.0 + 1e-12);
    CHECK(z == doctest::Approx(oracle::overlap(raw)).epsilon(1e-12));
    // Symmetric under vehicle permutation.
    auto perm = raw;
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(average_overlap_rate(hists(perm)) == doctest::Approx(z).epsilon(1e-12));

    const LabelHistogram g = global_histogram(h);
    for (std::size_t k = 0; k < m; ++k) {
      std::size_t s = 0;
      for (auto& r : raw) s += r[k];
      CHECK(g.counts[k] == s);
    }
    const double e = normalized_entropy(g);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0 + 1e-12);
    CHECK(e == doctest::Approx(oracle::entropy_ratio(g.counts)).epsilon(1e-12));
    auto labels = g.counts;
    std::shuffle(labels.begin(), labels.end(), rng);
    CHECK(normalized_entropy(LabelHistogram(labels)) == doctest::Approx(e).epsilon(1e-12));

    double rs = 0;
    for (double r : h[0].ratios()) rs += r;
    CHECK(rs == doctest::Approx(1.0));

    const auto top = *std::max_element(raw[0].begin(), raw[0].end());
    const auto gap = sample_shortfall(h[0]);
    for (std::size_t k = 0; k < m; ++k) CHECK(gap[k] + raw[0][k] == top);
  }
}

TEST_CASE("label skew reduces overlap, conserves samples and nests") {
  const Dataset& ds = fleet().dataset;
  const Partition base = base_partition(ds);
  const double z0 = average_overlap_rate(vehicle_histograms(base, ds));
  const Partition l = make_label_imbalanced_partition(base, ds, ImbalanceLevel::kLow, 3);
  const Partition m = make_label_imbalanced_partition(base, ds, ImbalanceLevel::kMedium, 3);
  const Partition h = make_label_imbalanced_partition(base, ds, ImbalanceLevel::kHigh, 3);
  const double zl = average_overlap_rate(vehicle_histograms(l, ds));
  const double zm = average_overlap_rate(vehicle_histograms(m, ds));
  const double zh = average_overlap_rate(vehicle_histograms(h, ds));
  CHECK(zl < z0);
  CHECK(zm < zl);
  CHECK(zh < zm);
  for (const Partition* p : {&l, &m, &h}) {
    CHECK(p->total_entries() == ds.samples.size());
    std::set<std::size_t> ids;
    for (const auto& v : p->vehicles) {
      for (const auto& e : v.entries) ids.insert(e.sample_id);
    }
    CHECK(ids.size() == ds.samples.size());
  }
  CHECK(make_label_imbalanced_partition(base, ds, ImbalanceLevel::kHigh, 3) == h);
  for (std::size_t v = 0; v < ds.manifest.num_vehicles; ++v) {
    const auto& rl = l.vehicles[v].removed_labels;
    const auto& rm = m.vehicles[v].removed_labels;
    const auto& rh = h.vehicles[v].removed_labels;
    CHECK(rl.size() == 6);
    CHECK(rm.size() == 9);
    CHECK(rh.size() == 12);
    CHECK(std::equal(rl.begin(), rl.end(), rm.begin()));
    CHECK(std::equal(rm.begin(), rm.end(), rh.begin()));
    // Vehicles after the first keep none of their removed labels.
    if (v > 0) {
      for (const auto& e : h.vehicles[v].entries) {
        const std::size_t lab = ds.samples[e.sample_id].label;
        CHECK(std::find(rh.begin(), rh.end(), lab) == rh.end());
      }
    }
  }
}

TEST_CASE("label skew rejects vehicles with too few labels") {
  const Dataset& ds = fleet().dataset;
  Partition base = base_partition(ds);
  auto& entries = base.vehicles[0].entries;
  const std::size_t keep = ds.samples[entries[0].sample_id].label;
  std::erase_if(entries, [&](const PartitionEntry& e) { return ds.samples[e.sample_id].label != keep; });
  CHECK_THROWS_AS(make_label_imbalanced_partition(base, ds, ImbalanceLevel::kLow, 1), InputError);
}

TEST_CASE("partial masks hit the drop rate and never touch GPS") {
  const Dataset& ds = fleet().dataset;
  const Partition base = base_partition(ds);
  MaskSpec spec;
  spec.drop_rate = 0.8;
  const Partition p = make_modality_masked_partition(base, spec, 8);
  const ModalityCensus c0 = modality_census(base), c = modality_census(p);
  for (std::size_t v = 0; v < p.num_vehicles(); ++v) {
    CHECK(c.count(v, Modality::kGps) == c0.count(v, Modality::kGps));
    const double n = static_cast<double>(c.count(v, Modality::kGps));
    const double sigma = std::sqrt(n * 0.8 * 0.2) / n;
    for (Modality q : {Modality::kRgb, Modality::kLidar}) {
      CHECK(std::abs(modality_completeness(c, v, q) - 0.2) <= 3 * sigma);
    }
  }
}

TEST_CASE("complete masks remove a modality from exactly k vehicles") {
  const Dataset& ds = fleet().dataset;
  const Partition base = base_partition(ds);
  MaskSpec spec;
  spec.kind = MaskKind::kComplete;
  spec.vehicles = 2;
  spec.modalities = ModalityMask::only(Modality::kLidar);
  const ModalityCensus c = modality_census(make_modality_masked_partition(base, spec, 8));
  std::size_t zero = 0;
  for (std::size_t v = 0; v < c.num_vehicles(); ++v) {
    if (modality_completeness(c, v, Modality::kLidar) == 0.0) ++zero;
    CHECK(modality_completeness(c, v, Modality::kRgb) == 1.0);
    CHECK(modality_completeness(c, v, Modality::kGps) == 1.0);
  }
  CHECK(zero == 2);
  spec.vehicles = 11;
  CHECK_THROWS_AS(make_modality_masked_partition(base, spec, 8), InputError);
}

TEST_CASE("full pipeline keeps test entries complete and split sizes stable") {
  const Dataset& ds = fleet().dataset;
  PartitionSpec spec;
  spec.label_level = ImbalanceLevel::kMedium;
  spec.mask = MaskSpec{};
  const Partition p = build_partition(ds, spec, 4);
  CHECK(p == build_partition(ds, spec, 4));
  CHECK(p.total_entries() == ds.samples.size());
  for (const auto& v : p.vehicles) {
    std::size_t train = 0;
    for (const auto& e : v.entries) {
      CHECK(e.role != SplitRole::kUnassigned);
      CHECK(e.mask.has(Modality::kGps));
      if (e.role == SplitRole::kTest) CHECK(e.mask.full());
      if (e.role == SplitRole::kTrain) ++train;
    }
    CHECK(train == static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(v.entries.size()))));
  }
}

TEST_CASE("partition and spec JSON round-trip") {
  const Dataset& ds = fleet().dataset;
  PartitionSpec spec;
  spec.label_level = ImbalanceLevel::kLow;
  spec.mask = MaskSpec{MaskKind::kComplete, 0.4, 4, ModalityMask::only(Modality::kRgb)};
  const nlohmann::json js = spec;
  const PartitionSpec back = js.get<PartitionSpec>();
  CHECK(back.label_level == spec.label_level);
  CHECK(back.mask->kind == MaskKind::kComplete);
  CHECK(back.mask->vehicles == 4);
  CHECK(back.mask->modalities == ModalityMask::only(Modality::kRgb));
  const Partition p = build_partition(ds, spec, 2);
  const nlohmann::json jp = p;
  CHECK(jp.get<Partition>() == p);
  CHECK(parse_level("H") == ImbalanceLevel::kHigh);
  CHECK_THROWS(parse_level("X"));
}
