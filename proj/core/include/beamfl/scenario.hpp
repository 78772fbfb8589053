#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beamfl/beam_model.hpp"

namespace beamfl {

using cplx = std::complex<double>;

/// LiDAR cell markers.
inline constexpr double kLidarEmpty = 0.0;
inline constexpr double kLidarObstacle = 1.0;
inline constexpr double kLidarTransmitter = -1.0;
inline constexpr double kLidarReceiver = -2.0;

struct ScenarioConfig {
  std::size_t num_antennas = 16;
  std::size_t num_beams = 16;
  std::size_t num_vehicles = 10;
  std::size_t samples_per_vehicle = 200;

  // Service area in front of the array; the BS sits at the origin and the
  // array boresight points along +y.
  double x_min = -60.0;
  double x_max = 60.0;
  double y_min = 5.0;
  double y_max = 50.0;
  double lane_jitter = 3.0;

  std::size_t max_obstacles = 4;
  double obstacle_min_size = 2.0;
  double obstacle_max_size = 6.0;
  double obstacle_min_height = 1.0;
  double obstacle_max_height = 4.0;
  double vehicle_height = 1.5;
  double bs_height = 4.0;

  std::size_t num_reflectors = 2;
  double reflection_loss_db = 10.0;
  double gps_noise_std = 0.0;
  double noise_power = 1e-4;
  double tx_power = 1.0;

  std::array<std::size_t, 2> rgb_dims{8, 8};       // rows (height), cols (azimuth)
  std::array<std::size_t, 3> lidar_dims{4, 4, 8};  // (z, y, x), flattened row-major

  std::uint64_t seed = 0;

  std::size_t rgb_size() const { return rgb_dims[0] * rgb_dims[1]; }
  std::size_t lidar_size() const { return lidar_dims[0] * lidar_dims[1] * lidar_dims[2]; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);

/// M unit-norm DFT beams over an N_t-element half-wavelength ULA. Beam m
/// points at sin(theta) = -1 + 2m/M, so beam M/2 is boresight when M is even.
struct Codebook {
  std::size_t num_antennas = 0;
  std::vector<std::vector<cplx>> beams;

  std::size_t size() const { return beams.size(); }
  double direction(std::size_t m) const;  // sin(theta) of beam m
};

Codebook make_dft_codebook(std::size_t num_antennas, std::size_t num_beams);

/// Unit-modulus ULA response, element n = exp(j*pi*n*sin_theta).
std::vector<cplx> steering_vector(std::size_t num_antennas, double sin_theta);

/// h^H w.
cplx inner(std::span<const cplx> h, std::span<const cplx> w);

/// argmax_m |h^H w_m|, ties to the lowest index.
std::size_t best_beam(std::span<const cplx> h, const Codebook& codebook);

struct Obstacle {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // axis-aligned footprint, x0<x1, y0<y1
  double height = 0;
};

/// True iff segment (a -> b) touches the obstacle footprint.
bool segment_hits_box(std::array<double, 2> a, std::array<double, 2> b, const Obstacle& box);

struct PathInfo {
  double sin_theta = 0;
  cplx gain;
  bool line_of_sight = false;
};

struct WorldSnapshot {
  std::array<double, 2> bs{0.0, 0.0};
  std::array<double, 2> vehicle{0.0, 0.0};
  std::vector<Obstacle> obstacles;
  bool los_blocked = false;
  std::vector<PathInfo> paths;
};

struct Sample {
  std::size_t id = 0;
  std::size_t vehicle = 0;
  std::vector<double> gps;    // 2 values: vehicle minus BS position (m)
  std::vector<double> rgb;    // rgb_dims, row-major
  std::vector<double> lidar;  // lidar_dims, values in {0, 1, -1, -2}
  std::size_t label = 0;      // 0-based beam index (files store label + 1)
  ModalityMask mask = ModalityMask::all();
  bool synthetic = false;
  std::vector<cplx> channel;  // may be empty for external data
  bool line_of_sight = true;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DatasetManifest {
  std::size_t num_vehicles = 0;
  std::size_t num_beams = 0;
  std::size_t num_antennas = 0;
  std::size_t gps_dim = 2;
  std::array<std::size_t, 2> rgb_dims{8, 8};
  std::array<std::size_t, 3> lidar_dims{4, 4, 8};
  std::vector<std::size_t> samples_per_vehicle;
  std::uint64_t seed = 0;
  double noise_power = 1e-4;
  double tx_power = 1.0;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Samples are stored flat; `samples[i].id == i` always holds.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  /// Sample ids owned by each vehicle, in id order.
  std::vector<std::vector<std::size_t>> ids_by_vehicle() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Scenario {
  ScenarioConfig config;
  Codebook codebook;
  Dataset dataset;
  std::vector<WorldSnapshot> worlds;  // one per sample
};

/// Builds the synthetic world. Deterministic in (config, seed): each sample
/// draws from its own generator seeded from (seed, vehicle, index).
Scenario generate_scenario(const ScenarioConfig& config, std::uint64_t seed);

/// Builds the channel vector for a placed world (fills snapshot.paths and
/// snapshot.los_blocked). Exposed for tests.
std::vector<cplx> build_channel(WorldSnapshot& world, const ScenarioConfig& config,
                                std::uint64_t phase_seed);

/// Observation grids for a world, following the marker convention above.
std::vector<double> render_lidar(const WorldSnapshot& world, const ScenarioConfig& config);
std::vector<double> render_rgb(const WorldSnapshot& world, const ScenarioConfig& config);

/// True iff the grid only holds {0,1,-1,-2} with exactly one -1 and one -2.
bool lidar_is_valid(std::span<const double> lidar);

/// sum_v log2(1 + |h_v^H w_v|^2 / (sum_{i != v} |h_v^H w_i|^2 + noise)), where
/// w_v is the codebook beam scaled so sum_v ||w_v||^2 = tx_power.
double sum_rate(std::span<const std::vector<cplx>> channels, std::span<const std::size_t> beams,
                const Codebook& codebook, double tx_power, double noise_power);

/// Beams scaled by sqrt(tx_power / V).
std::vector<std::vector<cplx>> power_scaled_beams(std::span<const std::size_t> beams,
                                                  const Codebook& codebook, double tx_power);

/// Splits the samples into consecutive groups of `users_per_group` served
/// together and returns sum_groups rate(chosen) / sum_groups rate(optimal),
/// where the optimal beams are the stored sweep labels.
double sum_rate_ratio(std::span<const std::size_t> chosen, std::span<const Sample* const> samples,
                      const Codebook& codebook, double tx_power, double noise_power,
                      std::size_t users_per_group);

/// Model-driven variant: predicts beams with `model` in eval mode first.
double sum_rate_ratio(const MultiModalNet& model, std::span<const Sample* const> samples,
                      const Codebook& codebook, double tx_power, double noise_power,
                      std::size_t users_per_group);

/// Stacks samples into a model batch, honoring each sample's mask.
ModalBatch make_batch(std::span<const Sample* const> samples, const ArchConfig& arch);

}  // namespace beamfl
