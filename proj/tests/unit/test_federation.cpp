#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "beamfl/checkpoint.hpp"
#include "beamfl/error.hpp"
#include "beamfl/federation.hpp"
#include "beamfl/partition.hpp"
#include "beamfl/run_state.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace beamfl;

namespace {

using Rows = std::vector<std::vector<double>>;

const Scenario& small_world() {
  static const Scenario s = [] {
    ScenarioConfig c;
    c.num_vehicles = 4;
    c.samples_per_vehicle = 40;
    return generate_scenario(c, 13);
  }();
  return s;
}

RoundConfig quick_rounds(std::size_t rounds) {
  RoundConfig rc;
  rc.rounds = rounds;
  rc.local_epochs = 1;
  rc.batch_size = 16;
  rc.learning_rate = 1e-3;
  rc.seed = 3;
  rc.gen.epochs = 5;
  rc.gen_batch = 16;
  rc.synth_budget = 0.25;
  rc.eval_rounds = 2;
  return rc;
}

MultiModalNet shifted(const ArchConfig& arch, std::uint64_t seed) {
  ArchConfig a = arch;
  a.seed = seed;
  MultiModalNet net = MultiModalNet::build(a);
  for (BranchId b : kAllBranches) {
    for (auto* bn : net.branch(b).bn_layers()) {
      for (std::size_t c = 0; c < bn->width(); ++c) {
        bn->running_mean[c] = 0.1 * static_cast<double>(seed + c);
        bn->running_var[c] = 1.0 + 0.01 * static_cast<double>(seed * c);
      }
    }
  }
  return net;
}

std::vector<double> flat_state(const Network& n) {
  std::vector<double> out;
  n.for_each_state([&](auto span) { out.insert(out.end(), span.begin(), span.end()); });
  return out;
}

double oracle_loss(const MultiModalNet& net, const std::vector<const Sample*>& xs) {
  Rows fused(xs.size());
  for (Modality q : kAllModalities) {
    Rows in;
    for (const Sample* s : xs) {
      const auto& v = q == Modality::kGps ? s->gps : q == Modality::kRgb ? s->rgb : s->lidar;
      in.push_back(v);
    }
    const Rows out = oracle::forward(net.branch(branch_of(q)), in, true);
    for (std::size_t r = 0; r < xs.size(); ++r) fused[r].insert(fused[r].end(), out[r].begin(), out[r].end());
  }
  const Rows logits = oracle::forward(net.branch(BranchId::kIntegration), fused, true);
  Rows t(xs.size(), std::vector<double>(net.arch().num_beams, 0.0));
  for (std::size_t r = 0; r < xs.size(); ++r) t[r][xs[r]->label] = 1.0;
  return oracle::cross_entropy(logits, t);
}

std::string metrics_text(const TrainReport& r) {
  std::ostringstream os;
  write_metrics_csv(os, r.rounds);
  return os.str();
}

}  // namespace

TEST_CASE("trigger examples") {
  CHECK(generation_trigger(std::vector<double>{1.0, 0.4}, 0.5));
  CHECK_FALSE(generation_trigger(std::vector<double>{1.0, 0.99}, 0.5));
  CHECK_FALSE(generation_trigger(std::vector<double>{1.0}, 0.5));
  CHECK_FALSE(generation_trigger(std::vector<double>{}, 0.5));
  CHECK(generation_trigger(std::vector<double>{1.0, 0.99}, 0.5, TriggerDirection::kDeclineBelow));
  CHECK_FALSE(generation_trigger(std::vector<double>{1.0, 0.4}, 0.5, TriggerDirection::kDeclineBelow));
  CHECK(*loss_decline(std::vector<double>{3.0, 2.0, 1.5}) == 0.5);
  CHECK_FALSE(loss_decline(std::vector<double>{3.0}).has_value());
}

TEST_CASE("aggregation examples") {
  const ArchConfig arch;
  const MultiModalNet prev = shifted(arch, 1), p = shifted(arch, 2), q = shifted(arch, 3);
  const auto sp = split_branches(p), sq = split_branches(q);
  std::vector<Upload> ups(2);
  ups[0].vehicle = 0;
  ups[1].vehicle = 1;
  for (BranchId b : kAllBranches) {
    ups[0].branches.push_back(sp[index_of(b)]);
    ups[1].branches.push_back(sq[index_of(b)]);
  }
  const MultiModalNet avg = aggregate(prev, ups);
  for (BranchId b : kAllBranches) {
    const auto a = flat_state(avg.branch(b)), x = flat_state(p.branch(b)), y = flat_state(q.branch(b));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == (x[i] + y[i]) / 2.0);
  }

  // Identical uploads are a fixed point.
  std::vector<Upload> same(3, ups[0]);
  const MultiModalNet fixed = aggregate(prev, same);
  for (BranchId b : kAllBranches) CHECK(fixed.branch(b) == p.branch(b));

  // A single RGB owner sets the RGB branch; nobody uploads LiDAR.
  std::vector<Upload> partial(2);
  partial[0].branches = {sp[index_of(BranchId::kGps)], sp[index_of(BranchId::kRgb)],
                         sp[index_of(BranchId::kIntegration)]};
  partial[1].branches = {sq[index_of(BranchId::kGps)], sq[index_of(BranchId::kIntegration)]};
  std::vector<std::string> warnings;
  const MultiModalNet mixed = aggregate(prev, partial, &warnings);
  CHECK(mixed.branch(BranchId::kRgb) == p.branch(BranchId::kRgb));
  CHECK(mixed.branch(BranchId::kLidar) == prev.branch(BranchId::kLidar));
  CHECK(warnings.size() == 1);
}

TEST_CASE("local update with zero learning rate only moves running statistics") {
  const Dataset& ds = small_world().dataset;
  ArchConfig arch;
  MultiModalNet net = MultiModalNet::build(arch);
  const MultiModalNet before = net;
  std::vector<LocalItem> items;
  for (std::size_t i = 0; i < 20; ++i) items.push_back({&ds.samples[i], ModalityMask::all(), nullptr});
  std::array<bool, kNumBranches> all{};
  all.fill(true);
  (void)local_update(net, items, all, 2, 8, 0.0, 1);
  for (BranchId b : kAllBranches) {
    const auto x = net.branch(b).parameters();
    const auto y = before.branch(b).parameters();
    for (std::size_t k = 0; k < x.size(); ++k) {
      CHECK(std::equal(x[k].begin(), x[k].end(), y[k].begin()));
    }
  }
}

TEST_CASE("local update leaves branches outside the update set alone") {
  const Dataset& ds = small_world().dataset;
  MultiModalNet net = MultiModalNet::build(ArchConfig{});
  const MultiModalNet before = net;
  std::vector<LocalItem> items;
  for (std::size_t i = 0; i < 20; ++i) items.push_back({&ds.samples[i], ModalityMask::parse("GR-"), nullptr});
  std::array<bool, kNumBranches> held{true, true, false, true};
  (void)local_update(net, items, held, 1, 8, 1e-2, 1);
  CHECK(net.branch(BranchId::kLidar) == before.branch(BranchId::kLidar));
  CHECK_FALSE(net.branch(BranchId::kRgb) == before.branch(BranchId::kRgb));
}

TEST_CASE("one local step matches a hand-executed Adam step") {
  const Dataset& ds = small_world().dataset;
  ArchConfig arch;
  arch.seed = 8;
  const MultiModalNet start = MultiModalNet::build(arch);
  MultiModalNet net = start;
  const std::vector<const Sample*> xs = {&ds.samples[0], &ds.samples[1]};
  std::vector<LocalItem> items;
  for (const Sample* s : xs) items.push_back({s, ModalityMask::all(), nullptr});
  std::array<bool, kNumBranches> all{};
  all.fill(true);
  const double lr = 1e-3;
  (void)local_update(net, items, all, 1, 2, lr, 4);

  MultiModalNet probe = start;
  std::size_t checked = 0;
  for (BranchId b : kAllBranches) {
    auto params = probe.branch(b).parameters();
    const auto after = net.branch(b).parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k].size(); i += 9) {
        const double orig = params[k][i], h = 1e-6;
        params[k][i] = orig + h;
        const double up = oracle_loss(probe, xs);
        params[k][i] = orig - h;
        const double down = oracle_loss(probe, xs);
        params[k][i] = orig;
        const double g = (up - down) / (2 * h);
        if (std::abs(g) < 1e-4) continue;
        // First bias-corrected Adam step: m_hat = g, v_hat = g^2.
        const double want = orig - lr * g / (std::abs(g) + 1e-8);
        CHECK(std::abs(after[k][i] - want) < 1e-10);
        ++checked;
      }
    }
  }
  CHECK(checked > 300);
}

TEST_CASE("full-modality GFL4BS without generation reduces to FedAvg bit-for-bit") {
  const Dataset& ds = small_world().dataset;
  PartitionSpec spec;
  const Partition p = build_partition(ds, spec, 1);
  ArchConfig arch;
  arch.seed = 1;
  RoundConfig rc = quick_rounds(5);
  rc.max_generations = 0;
  const TrainResult g = run_training(ds, p, Protocol::kGfl4bs, arch, rc);
  const TrainResult f = run_training(ds, p, Protocol::kFedAvg, arch, rc);
  CHECK(g.model == f.model);
  CHECK(metrics_text(g.report) == metrics_text(f.report));
  CHECK(g.ledger == f.ledger);
}

TEST_CASE("ledger matches closed-form predictions for every protocol") {
  const Dataset& ds = small_world().dataset;
  PartitionSpec spec;
  spec.mask = MaskSpec{MaskKind::kComplete, 0.0, 2, ModalityMask::parse("-RL")};
  const Partition p = build_partition(ds, spec, 2);
  ArchConfig arch;
  RoundConfig rc = quick_rounds(3);
  rc.max_generations = 0;
  const auto vehicles = make_vehicles(p, Protocol::kGfl4bs);
  std::size_t gps_only = 0;
  for (Protocol proto : {Protocol::kGfl4bs, Protocol::kFedAvg, Protocol::kFlash}) {
    const TrainResult r = run_training(ds, p, proto, arch, rc);
    REQUIRE(r.ledger.entries.size() == 3 * vehicles.size());
    for (const TransferRecord& t : r.ledger.entries) {
      std::optional<Modality> sel;
      if (proto == Protocol::kFlash && t.round > 1) sel = r.report.flash_selected.at(t.round - 2);
      const ModalityMask sensors = proto == Protocol::kGfl4bs ? vehicles[t.vehicle].sensors : ModalityMask::all();
      const TransferPrediction want = predicted_transfer(arch, proto, sensors, t.round, sel);
      CHECK(t.params_down == want.down);
      CHECK(t.params_up == want.up);
      if (proto == Protocol::kGfl4bs && sensors == ModalityMask::only(Modality::kGps)) {
        ++gps_only;
        CHECK(t.params_up == expected_counts(arch, BranchId::kGps).state +
                                 expected_counts(arch, BranchId::kIntegration).state);
      }
    }
    std::size_t up = 0;
    for (const auto& m : r.report.rounds) up += m.params_up;
    CHECK(up == r.ledger.total_up());
  }
  CHECK(gps_only == 6);
  const TrainResult cl = run_training(ds, p, Protocol::kCl, arch, rc);
  std::vector<LocalItem> pooled;
  for (const auto& v : vehicles) {
    for (const auto& e : v.train) pooled.push_back({&ds.samples[e.sample_id], e.mask, nullptr});
  }
  CHECK(cl.ledger.total_up() == raw_upload_volume(arch, pooled));
}

TEST_CASE("runs are deterministic and parallel mode agrees with sequential") {
  const Dataset& ds = small_world().dataset;
  PartitionSpec spec;
  spec.label_level = ImbalanceLevel::kLow;
  const Partition p = build_partition(ds, spec, 5);
  ArchConfig arch;
  RoundConfig rc = quick_rounds(3);
  rc.gamma = -1.0;  // trigger whenever a decline is defined
  const TrainResult a = run_training(ds, p, Protocol::kGfl4bs, arch, rc);
  const TrainResult b = run_training(ds, p, Protocol::kGfl4bs, arch, rc);
  CHECK(a.report.generations > 0);
  CHECK(metrics_text(a.report) == metrics_text(b.report));
  CHECK(a.model == b.model);
  rc.parallel = true;
  const TrainResult c = run_training(ds, p, Protocol::kGfl4bs, arch, rc);
  CHECK(metrics_text(a.report) == metrics_text(c.report));
  CHECK(a.model == c.model);
}

TEST_CASE("a resumed run continues exactly") {
  const Dataset& ds = small_world().dataset;
  PartitionSpec spec;
  spec.label_level = ImbalanceLevel::kLow;
  spec.mask = MaskSpec{};
  const Partition p = build_partition(ds, spec, 6);
  ArchConfig arch;
  RoundConfig rc = quick_rounds(4);
  rc.gamma = -1.0;
  const TrainResult eval = run_training(ds, p, Protocol::kFedAvg, arch, rc);
  const std::string path = (std::filesystem::temp_directory_path() / "beamfl_state_test.bin").string();
  for (Protocol proto : {Protocol::kGfl4bs, Protocol::kFlash}) {
    TrainOptions opts;
    opts.eval_model = &eval.model;
    const TrainResult full = run_training(ds, p, proto, arch, rc, opts);
    opts.stop_after = 2;
    opts.on_round = [&](const TrainingState& s) {
      if (s.completed_rounds == 2) save_training_state(path, s);
    };
    (void)run_training(ds, p, proto, arch, rc, opts);
    const TrainingState state = load_training_state(path);
    CHECK(state.completed_rounds == 2);
    TrainOptions again;
    again.eval_model = &eval.model;
    again.resume = &state;
    const TrainResult resumed = run_training(ds, p, proto, arch, rc, again);
    CHECK(resumed.model == full.model);
    CHECK(metrics_text(resumed.report) == metrics_text(full.report));
    CHECK(resumed.ledger == full.ledger);
  }
  std::filesystem::remove(path);
}

TEST_CASE("report variance is the population variance of local accuracies") {
  const Dataset& ds = small_world().dataset;
  const Partition p = build_partition(ds, PartitionSpec{}, 7);
  RoundConfig rc = quick_rounds(2);
  const TrainResult r = run_training(ds, p, Protocol::kFedAvg, ArchConfig{}, rc);
  REQUIRE(r.report.local_acc.size() == 4);
  double mean = 0, var = 0;
  for (double a : r.report.local_acc) mean += a / 4.0;
  for (double a : r.report.local_acc) var += (a - mean) * (a - mean) / 4.0;
  CHECK(r.report.local_var == doctest::Approx(var).epsilon(1e-12));
  CHECK(population_variance(std::vector<double>{1, 2, 3, 4}) == doctest::Approx(1.25));
  CHECK(r.report.sum_rate_ratio > 0.0);
  CHECK(r.report.sum_rate_ratio <= 1.0 + 1e-12);
}

TEST_CASE("metrics CSV round-trips") {
  std::vector<RoundMetrics> rows(2);
  rows[0] = {1, 0.25, 0.5, 0.125, std::numeric_limits<double>::quiet_NaN(), false, 100, 200};
  rows[1] = {2, 0.1, 1.0 / 3.0, 1e-17, 0.05, true, 7, 9};
  std::stringstream ss;
  write_metrics_csv(ss, rows);
  CHECK(ss.str().rfind("round,global_acc,mean_local_acc,local_var,dL,triggered,params_up,params_down\n", 0) == 0);
  const auto back = read_metrics_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(std::isnan(back[0].delta_loss));
  CHECK(back[1] == rows[1]);
  CHECK(back[0].global_acc == rows[0].global_acc);
}

TEST_CASE("round config validation") {
  RoundConfig rc;
  rc.rounds = 0;
  CHECK_THROWS_AS(rc.validate(), ConfigError);
  rc.rounds = 1;
  rc.local_epochs = 0;
  CHECK_THROWS_AS(rc.validate(), ConfigError);
  CHECK(parse_protocol("FedAvg") == Protocol::kFedAvg);
  CHECK_THROWS(parse_protocol("fedprox"));
  CHECK_THROWS_AS(predicted_transfer(ArchConfig{}, Protocol::kCl, ModalityMask::all(), 1), InputError);
}

TEST_CASE("centralized learning fits a clear-sky scenario") {
  ScenarioConfig c;
  c.num_vehicles = 2;
  c.samples_per_vehicle = 100;
  c.max_obstacles = 0;
  const Scenario s = generate_scenario(c, 17);
  const Partition p = build_partition(s.dataset, PartitionSpec{}, 17);
  RoundConfig rc;
  rc.rounds = 100;
  rc.local_epochs = 5;
  rc.batch_size = 32;
  rc.learning_rate = 3e-3;
  rc.seed = 17;
  const TrainResult r = run_training(s.dataset, p, Protocol::kCl, ArchConfig{}, rc);
  CHECK(r.report.global_acc >= 0.9);
}
