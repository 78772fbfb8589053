#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "beamfl/dataset_io.hpp"
#include "beamfl/error.hpp"
#include "beamfl/scenario.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace beamfl;

namespace {

using cvec = std::vector<std::complex<double>>;

// DFT beam written out independently of the library.
cvec dft_beam(std::size_t n_t, std::size_t m, std::size_t n_beams) {
  const double s = -1.0 + 2.0 * static_cast<double>(m) / static_cast<double>(n_beams);
  cvec w(n_t);
  for (std::size_t n = 0; n < n_t; ++n) {
    w[n] = std::polar(1.0 / std::sqrt(static_cast<double>(n_t)), std::numbers::pi * static_cast<double>(n) * s);
  }
  return w;
}

std::size_t sweep(const cvec& h, std::size_t n_beams) {
  std::size_t best = 0;
  double top = -1;
  for (std::size_t m = 0; m < n_beams; ++m) {
    const cvec w = dft_beam(h.size(), m, n_beams);
    std::complex<double> acc = 0;
    for (std::size_t n = 0; n < h.size(); ++n) acc += std::conj(h[n]) * w[n];
    if (std::abs(acc) > top) {
      top = std::abs(acc);
      best = m;
    }
  }
  return best;
}

cvec random_channel(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g;
  cvec h(n);
  for (auto& c : h) c = {g(rng), g(rng)};
  return h;
}

std::string temp_dir(const char* name) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p.string();
}

void rewrite_first_sample(const std::string& dir, const std::string& from, const std::string& to) {
  const std::string path = dir + "/samples.jsonl";
  std::ifstream in(path);
  std::string first, rest, line;
  std::getline(in, first);
  while (std::getline(in, line)) rest += line + "\n";
  const auto pos = first.find(from);
  REQUIRE(pos != std::string::npos);
  first.replace(pos, from.size(), to);
  std::ofstream(path) << first << "\n" << rest;
}

}  // namespace

TEST_CASE("codebook beams are unit-norm DFT vectors") {
  for (std::size_t m_beams : {16u, 34u}) {
    const Codebook cb = make_dft_codebook(16, m_beams);
    REQUIRE(cb.size() == m_beams);
    for (std::size_t m = 0; m < m_beams; ++m) {
      double norm = 0;
      const cvec ref = dft_beam(16, m, m_beams);
      for (std::size_t n = 0; n < 16; ++n) {
        norm += std::norm(cb.beams[m][n]);
        CHECK(std::abs(cb.beams[m][n] - ref[n]) < 1e-14);
      }
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS(make_dft_codebook(16, 1));
}

TEST_CASE("a clear boresight vehicle gets the boresight beam") {
  ScenarioConfig cfg;
  WorldSnapshot w;
  w.vehicle = {0.0, 20.0};
  const auto h = build_channel(w, cfg, 1);
  CHECK_FALSE(w.los_blocked);
  CHECK(best_beam(h, make_dft_codebook(16, 16)) == 8);
}

TEST_CASE("blockage follows the segment and is direction symmetric") {
  const Obstacle box{-1.0, 9.0, 1.0, 11.0, 2.0};
  CHECK(segment_hits_box({0, 0}, {0, 20}, box));
  CHECK(segment_hits_box({0, 20}, {0, 0}, box));
  CHECK_FALSE(segment_hits_box({0, 0}, {20, 5}, box));
  CHECK_FALSE(segment_hits_box({20, 5}, {0, 0}, box));
  ScenarioConfig cfg;
  WorldSnapshot w;
  w.vehicle = {0.0, 20.0};
  w.obstacles.push_back(box);
  (void)build_channel(w, cfg, 1);
  CHECK(w.los_blocked);
}

TEST_CASE("generated samples satisfy the world invariants") {
  ScenarioConfig cfg;
  cfg.samples_per_vehicle = 60;
  const Scenario s = generate_scenario(cfg, 9);
  REQUIRE(s.dataset.samples.size() == 600);
  std::size_t nlos = 0;
  for (std::size_t i = 0; i < s.dataset.samples.size(); ++i) {
    const Sample& x = s.dataset.samples[i];
    CHECK(x.id == i);
    CHECK(x.label == sweep(x.channel, 16));
    CHECK(x.gps[0] == s.worlds[i].vehicle[0] - s.worlds[i].bs[0]);
    CHECK(x.gps[1] == s.worlds[i].vehicle[1] - s.worlds[i].bs[1]);
    CHECK(x.gps[0] >= cfg.x_min);
    CHECK(x.gps[0] <= cfg.x_max);
    CHECK(x.gps[1] >= cfg.y_min);
    CHECK(x.gps[1] <= cfg.y_max);
    CHECK(lidar_is_valid(x.lidar));
    CHECK(x.rgb.size() == cfg.rgb_size());
    if (!x.line_of_sight) ++nlos;
  }
  CHECK(nlos > 0);
  CHECK(nlos < 600);
  CHECK(generate_scenario(cfg, 9).dataset == s.dataset);
  CHECK_FALSE(generate_scenario(cfg, 10).dataset == s.dataset);
}

TEST_CASE("lidar validity") {
  std::vector<double> g(128, 0.0);
  CHECK_FALSE(lidar_is_valid(g));
  g[3] = -1;
  g[9] = -2;
  g[10] = 1;
  CHECK(lidar_is_valid(g));
  g[11] = -2;
  CHECK_FALSE(lidar_is_valid(g));
  g[11] = 2;
  CHECK_FALSE(lidar_is_valid(g));
}

TEST_CASE("sum rate matches the naive oracle and the closed forms") {
  const Codebook cb = make_dft_codebook(16, 16);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> beam(0, 15);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t v = 1 + trial % 5;
    std::vector<cvec> h;
    std::vector<std::size_t> beams;
    for (std::size_t i = 0; i < v; ++i) {
      h.push_back(random_channel(rng, 16));
      beams.push_back(beam(rng));
    }
    std::vector<cvec> w;
    for (std::size_t b : beams) {
      cvec x = dft_beam(16, b, 16);
      for (auto& c : x) c *= std::sqrt(2.0 / static_cast<double>(v));
      w.push_back(x);
    }
    const double got = sum_rate(h, beams, cb, 2.0, 0.3);
    CHECK(oracle::rel_err(got, oracle::sum_rate(h, w, 0.3)) < 1e-12);
    const auto scaled = power_scaled_beams(beams, cb, 2.0);
    double p = 0;
    for (const auto& x : scaled) {
      for (auto c : x) p += std::norm(c);
    }
    CHECK(std::abs(p - 2.0) < 1e-9);
    // Monotone in noise power.
    CHECK(sum_rate(h, beams, cb, 2.0, 0.6) <= got);
  }

  // Single user: log2(1 + P |h^H w|^2 / sigma^2).
  const cvec h = dft_beam(16, 5, 16);
  const std::vector<cvec> one{h};
  const std::vector<std::size_t> b5{5};
  CHECK(sum_rate(one, b5, cb, 1.0, 1e-2) == doctest::Approx(std::log2(1.0 + 1.0 / 1e-2)));

  // Orthogonal DFT beams: no interference.
  const std::vector<cvec> two{dft_beam(16, 2, 16), dft_beam(16, 10, 16)};
  const std::vector<std::size_t> b{2, 10};
  CHECK(sum_rate(two, b, cb, 2.0, 0.1) == doctest::Approx(2 * std::log2(1.0 + 1.0 / 0.1)));
}

TEST_CASE("sum-rate ratio sanity") {
  ScenarioConfig cfg;
  cfg.num_beams = 34;
  cfg.samples_per_vehicle = 40;
  const Scenario s = generate_scenario(cfg, 4);
  std::vector<const Sample*> ptrs;
  std::vector<std::size_t> truth, fixed, guess;
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> any(0, 33);
  for (const auto& x : s.dataset.samples) {
    ptrs.push_back(&x);
    truth.push_back(x.label);
    fixed.push_back(0);
    guess.push_back(any(rng));
  }
  const double p = cfg.tx_power, n = cfg.noise_power;
  CHECK(sum_rate_ratio(truth, ptrs, s.codebook, p, n, 4) == doctest::Approx(1.0));
  CHECK(sum_rate_ratio(fixed, ptrs, s.codebook, p, n, 4) < 1.0);
  const double r = sum_rate_ratio(guess, ptrs, s.codebook, p, n, 4);
  CHECK(r > 0.05);
  CHECK(r < 0.9);
}

TEST_CASE("dataset IO round-trips bit-exactly") {
  ScenarioConfig cfg;
  cfg.samples_per_vehicle = 15;
  cfg.gps_noise_std = 0.7;
  Dataset ds = generate_scenario(cfg, 2).dataset;
  ds.samples[3].mask = ModalityMask::parse("G-L");
  ds.samples[4].synthetic = true;
  const std::string dir = temp_dir("beamfl_ds_roundtrip");
  save_dataset(dir, ds);
  CHECK(load_dataset(dir) == ds);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset loader rejects bad rows") {
  ScenarioConfig cfg;
  cfg.num_beams = 34;
  cfg.samples_per_vehicle = 3;
  Dataset ds = generate_scenario(cfg, 2).dataset;
  ds.samples[0].label = 0;
  const std::string dir = temp_dir("beamfl_ds_bad");

  save_dataset(dir, ds);
  rewrite_first_sample(dir, "\"label\":1", "\"label\":35");
  CHECK_THROWS_AS(load_dataset(dir), LoadError);

  save_dataset(dir, ds);
  rewrite_first_sample(dir, "\"lidar\":[", "\"lidar\":[2,");
  CHECK_THROWS_AS(load_dataset(dir), LoadError);

  save_dataset(dir, ds);
  rewrite_first_sample(dir, "\"gps\":[", "\"gps\":[1.0,");
  CHECK_THROWS_AS(load_dataset(dir), LoadError);

  CHECK_THROWS_AS(load_dataset(dir + "/missing"), LoadError);
  std::filesystem::remove_all(dir);
}
