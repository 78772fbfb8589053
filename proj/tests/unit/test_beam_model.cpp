#include <cmath>
#include <filesystem>
#include <random>
#include <nlohmann/json.hpp>

#include "beamfl/beam_model.hpp"
#include "beamfl/checkpoint.hpp"
#include "beamfl/error.hpp"
#include "doctest.h"

using namespace beamfl;

namespace {

ArchConfig narrow_arch() {
  ArchConfig a;
  a.rgb.hidden = {32};
  a.lidar.hidden = {32};
  return a;
}

ModalBatch random_batch(const ArchConfig& arch, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  ModalBatch b;
  for (Modality q : kAllModalities) {
    Tensor t = Tensor::matrix(n, arch.extractor(q).input_dim);
    for (double& v : t.values()) v = g(rng);
    b.inputs[index_of(q)] = std::move(t);
  }
  b.present.assign(n, ModalityMask::all());
  return b;
}

}  // namespace

TEST_CASE("parameter counts equal the hand-computed layer sums") {
  // GPS 2->16->8: (2*16+16) + 2*16 + (16*8+8) + 2*8
  CHECK(expected_counts(narrow_arch(), BranchId::kGps).trainable == 48 + 32 + 136 + 16);
  const MultiModalNet narrow = MultiModalNet::build(narrow_arch());
  CHECK(narrow.branch(BranchId::kRgb).trainable_count() == 2080 + 64 + 528 + 32);
  CHECK(narrow.branch(BranchId::kLidar).trainable_count() == 4128 + 64 + 528 + 32);
  CHECK(narrow.branch(BranchId::kIntegration).trainable_count() == 2624 + 128 + 1040);
  CHECK(narrow.trainable_count() == 11480);

  const MultiModalNet net = MultiModalNet::build(ArchConfig{});
  CHECK(net.trainable_count() == 15160);
  std::size_t predicted = 0;
  for (BranchId b : kAllBranches) {
    CHECK(net.branch(b).trainable_count() == expected_counts(ArchConfig{}, b).trainable);
    CHECK(net.branch(b).state_count() == expected_counts(ArchConfig{}, b).state);
    predicted += expected_counts(ArchConfig{}, b).state;
  }
  CHECK(net.state_count() == predicted);
}

TEST_CASE("architecture widths follow the config") {
  ArchConfig a;
  CHECK(a.fused_dim() == 40);
  CHECK(a.feature_offset(Modality::kRgb) == 8);
  CHECK(a.feature_offset(Modality::kLidar) == 24);
  a.num_beams = 34;
  const MultiModalNet net = MultiModalNet::build(a);
  CHECK(net.branch(BranchId::kIntegration).output_dim() == 34);
  CHECK(net.branch(BranchId::kIntegration).input_dim() == 40);
  a.num_beams = 1;
  CHECK_THROWS_AS(MultiModalNet::build(a), ConfigError);
  ArchConfig zero;
  zero.gps.feature_dim = 0;
  CHECK_THROWS_AS(MultiModalNet::build(zero), ConfigError);
}

TEST_CASE("build is deterministic in the seed") {
  ArchConfig a;
  a.seed = 4;
  CHECK(MultiModalNet::build(a) == MultiModalNet::build(a));
  ArchConfig b = a;
  b.seed = 5;
  CHECK_FALSE(MultiModalNet::build(a) == MultiModalNet::build(b));
}

TEST_CASE("fusion zero-fills absent modalities in fixed order") {
  const ArchConfig arch;
  Tensor g = Tensor::matrix(2, 8, 1.0), r = Tensor::matrix(2, 16, 2.0), l = Tensor::matrix(2, 16, 3.0);
  const std::vector<ModalityMask> masks = {ModalityMask::all(), ModalityMask::parse("GR-")};
  const Tensor f = fuse_features(arch, {&g, &r, &l}, masks);
  CHECK(f(0, 0) == 1.0);
  CHECK(f(0, 8) == 2.0);
  CHECK(f(0, 39) == 3.0);
  for (std::size_t c = 24; c < 40; ++c) CHECK(f(1, c) == 0.0);
  const std::vector<ModalityMask> none = {ModalityMask::none()};
  const Tensor z = fuse_features(arch, {nullptr, nullptr, nullptr}, none);
  CHECK(z.cols() == 40);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("masked rows never read their absent inputs") {
  const ArchConfig arch;
  const MultiModalNet net = MultiModalNet::build(arch);
  ModalBatch a = random_batch(arch, 4, 1);
  a.present[2] = ModalityMask::parse("G--");
  ModalBatch b = a;
  for (double& v : b.inputs[index_of(Modality::kLidar)].row(2)) v = 1e6;
  for (double& v : b.inputs[index_of(Modality::kRgb)].row(2)) v = -1e6;
  CHECK(net.run(a, Mode::kEval).logits == net.run(b, Mode::kEval).logits);
}

TEST_CASE("model input gradients match central differences") {
  const ArchConfig arch;
  const MultiModalNet net = MultiModalNet::build(arch);
  ModalBatch batch = random_batch(arch, 3, 2);
  batch.present[1] = ModalityMask::parse("GR-");
  Tensor upstream = Tensor::matrix(3, 16);
  for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] = std::sin(static_cast<double>(i));
  auto objective = [&](const ModalBatch& b) {
    const Tensor z = net.run(b, Mode::kTrain).logits;
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += z[i] * upstream[i];
    return s;
  };
  const ModelForward fwd = net.run(batch, Mode::kTrain);
  const ModelGrads grads = net.backward(fwd, upstream, {}, true);
  for (Modality q : {Modality::kGps, Modality::kLidar}) {
    Tensor& x = batch.inputs[index_of(q)];
    for (std::size_t i = 0; i < x.size(); i += 7) {
      const double orig = x[i], h = 1e-6;
      x[i] = orig + h;
      const double up = objective(batch);
      x[i] = orig - h;
      const double down = objective(batch);
      x[i] = orig;
      CHECK(grads.inputs[index_of(q)][i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
    }
  }
  // Row 1 has no LiDAR, so its LiDAR gradient is exactly zero.
  for (double v : grads.inputs[index_of(Modality::kLidar)].row(1)) CHECK(v == 0.0);
}

TEST_CASE("prediction is the first maximum of the logits") {
  const ArchConfig arch;
  MultiModalNet net = MultiModalNet::build(arch);
  auto& last = std::get<DenseLayer>(net.branch(BranchId::kIntegration).layers().back());
  last.weight.fill(0.0);
  std::fill(last.bias.begin(), last.bias.end(), 0.0);
  last.bias[3] = last.bias[9] = 1.0;
  const Prediction p = net.predict(random_batch(arch, 2, 3));
  CHECK(p.beams == std::vector<std::size_t>{3, 3});
}

TEST_CASE("branch split and merge round-trip and reject bad parts") {
  const ArchConfig arch;
  const MultiModalNet net = MultiModalNet::build(arch);
  auto parts = split_branches(net);
  CHECK(merge_branches(arch, parts) == net);
  std::vector<BranchParams> missing(parts.begin(), parts.begin() + 3);
  CHECK_THROWS_AS(merge_branches(arch, missing), ProtocolError);
  std::vector<BranchParams> dup(parts.begin(), parts.end());
  dup.push_back(parts[0]);
  CHECK_THROWS_AS(merge_branches(arch, dup), ProtocolError);
  auto swapped = parts;
  std::swap(swapped[1].net, swapped[2].net);
  CHECK_THROWS_AS(merge_branches(arch, swapped), ProtocolError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ArchConfig arch;
  arch.seed = 77;
  MultiModalNet net = MultiModalNet::build(arch);
  ModalBatch b = random_batch(arch, 5, 9);
  (void)net.forward(b, Mode::kTrain);
  const auto bytes = serialize_model(net);
  CHECK(deserialize_model(bytes) == net);
  const auto path = (std::filesystem::temp_directory_path() / "beamfl_ckpt_test.bin").string();
  save_checkpoint(path, net);
  CHECK(load_checkpoint(path) == net);
  CHECK(model_fingerprint(load_checkpoint(path)) == model_fingerprint(net));
  auto broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(broken), LoadError);
  broken = bytes;
  broken.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_model(broken), LoadError);
  std::filesystem::remove(path);
}

TEST_CASE("arch config JSON round-trips") {
  ArchConfig a;
  a.num_beams = 34;
  a.integration_hidden = {32, 32};
  a.seed = 12;
  const nlohmann::json j = a;
  CHECK(j.get<ArchConfig>() == a);
}

TEST_CASE("modality mask text form") {
  CHECK(ModalityMask::all().str() == "GRL");
  CHECK(ModalityMask::parse("G-L").has(Modality::kLidar));
  CHECK_FALSE(ModalityMask::parse("G-L").has(Modality::kRgb));
  CHECK(ModalityMask::none().str() == "---");
  CHECK_THROWS_AS(ModalityMask::parse("GX"), InputError);
  CHECK_THROWS_AS(ModalityMask::parse("LRG"), InputError);
}
