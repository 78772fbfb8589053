#include <benchmark/benchmark.h>

#include <vector>

#include "beamfl/federation.hpp"
#include "beamfl/generator.hpp"
#include "beamfl/loss.hpp"
#include "beamfl/scenario.hpp"

using namespace beamfl;

namespace {

struct Fixture {
  ScenarioConfig sc;
  Scenario scenario;
  ArchConfig arch;
  MultiModalNet net;

  Fixture() {
    sc.num_vehicles = 2;
    sc.samples_per_vehicle = 128;
    scenario = generate_scenario(sc, 1);
    net = MultiModalNet::build(arch);
  }

  ModalBatch batch(std::size_t n) const {
    std::vector<const Sample*> ptrs;
    for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&scenario.dataset.samples[i % scenario.dataset.samples.size()]);
    return make_batch(ptrs, arch);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

static void BM_ModelForwardEval(benchmark::State& state) {
  const Fixture& f = fixture();
  const ModalBatch b = f.batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(f.net.run(b, Mode::kEval));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ModelForwardEval)->Arg(1)->Arg(32)->Arg(128);

static void BM_ModelForwardBackward(benchmark::State& state) {
  const Fixture& f = fixture();
  const auto n = static_cast<std::size_t>(state.range(0));
  const ModalBatch b = f.batch(n);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = f.scenario.dataset.samples[i].label;
  const Tensor targets = one_hot(labels, f.arch.num_beams);
  for (auto _ : state) {
    const ModelForward fwd = f.net.run(b, Mode::kTrain);
    const LossAndGrad lg = softmax_cross_entropy(fwd.logits, targets);
    benchmark::DoNotOptimize(f.net.backward(fwd, lg.grad));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ModelForwardBackward)->Arg(32)->Arg(128);

static void BM_LocalEpoch(benchmark::State& state) {
  const Fixture& f = fixture();
  std::vector<LocalItem> items;
  for (const Sample& x : f.scenario.dataset.samples) items.push_back({&x, ModalityMask::all(), nullptr});
  std::array<bool, kNumBranches> all{};
  all.fill(true);
  for (auto _ : state) {
    MultiModalNet net = f.net;
    benchmark::DoNotOptimize(local_update(net, items, all, 1, 32, 1e-3, 1));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(items.size()));
}
BENCHMARK(BM_LocalEpoch)->Unit(benchmark::kMillisecond);

// Ten generator iterations per benchmark iteration.
static void BM_GeneratorSteps(benchmark::State& state) {
  const Fixture& f = fixture();
  std::vector<std::size_t> targets(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i % f.arch.num_beams;
  GenConfig cfg;
  cfg.epochs = 10;
  const GenBounds bounds = generator_bounds(f.sc);
  for (auto _ : state) benchmark::DoNotOptimize(synthesize(f.net, f.net, targets, bounds, cfg));
}
BENCHMARK(BM_GeneratorSteps)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_Aggregate(benchmark::State& state) {
  const Fixture& f = fixture();
  std::vector<Upload> uploads;
  const auto parts = split_branches(f.net);
  for (std::size_t v = 0; v < 10; ++v) uploads.push_back({v, {parts.begin(), parts.end()}});
  for (auto _ : state) benchmark::DoNotOptimize(aggregate(f.net, uploads));
}
BENCHMARK(BM_Aggregate);

static void BM_SumRate(benchmark::State& state) {
  const Fixture& f = fixture();
  const auto& samples = f.scenario.dataset.samples;
  std::vector<const Sample*> ptrs;
  std::vector<std::size_t> beams;
  for (const Sample& x : samples) {
    ptrs.push_back(&x);
    beams.push_back(x.label);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        sum_rate_ratio(beams, ptrs, f.scenario.codebook, f.sc.tx_power, f.sc.noise_power, 4));
  }
}
BENCHMARK(BM_SumRate);

BENCHMARK_MAIN();
