#include "beamfl/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <string>

#include "beamfl/error.hpp"
#include "beamfl/loss.hpp"
#include "beamfl/seed.hpp"

namespace beamfl {
namespace {

std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  if (v <= lo) return 0;
  if (v >= hi) return bins - 1;
  const auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

double sin_angle(double x, double y) {
  const double r = std::hypot(x, y);
  return r > 0.0 ? x / r : 0.0;
}

std::array<double, 2> closest_point(const Obstacle& box, std::array<double, 2> p) {
  return {std::clamp(p[0], box.x0, box.x1), std::clamp(p[1], box.y0, box.y1)};
}

}  // namespace

void ScenarioConfig::validate() const {
  if (num_antennas == 0 || num_beams < 2 || num_vehicles == 0 || samples_per_vehicle == 0) {
    throw ConfigError("scenario needs positive antennas, vehicles, samples and at least 2 beams");
  }
  if (!(x_max > x_min) || !(y_max > y_min) || y_min <= 0.0) {
    throw ConfigError("scenario service area is degenerate");
  }
  if (!(noise_power > 0.0) || !(tx_power > 0.0)) throw ConfigError("noise and transmit power must be positive");
  if (rgb_size() == 0 || lidar_size() < 2) throw ConfigError("sensor grids are too small");
  if (!(obstacle_max_size >= obstacle_min_size) || obstacle_min_size <= 0.0) {
    throw ConfigError("obstacle size range is invalid");
  }
}

void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  j = {{"num_antennas", c.num_antennas},
       {"num_beams", c.num_beams},
       {"num_vehicles", c.num_vehicles},
       {"samples_per_vehicle", c.samples_per_vehicle},
       {"x_min", c.x_min},
       {"x_max", c.x_max},
       {"y_min", c.y_min},
       {"y_max", c.y_max},
       {"lane_jitter", c.lane_jitter},
       {"max_obstacles", c.max_obstacles},
       {"obstacle_min_size", c.obstacle_min_size},
       {"obstacle_max_size", c.obstacle_max_size},
       {"obstacle_min_height", c.obstacle_min_height},
       {"obstacle_max_height", c.obstacle_max_height},
       {"vehicle_height", c.vehicle_height},
       {"bs_height", c.bs_height},
       {"num_reflectors", c.num_reflectors},
       {"reflection_loss_db", c.reflection_loss_db},
       {"gps_noise_std", c.gps_noise_std},
       {"noise_power", c.noise_power},
       {"tx_power", c.tx_power},
       {"rgb_dims", c.rgb_dims},
       {"lidar_dims", c.lidar_dims},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ScenarioConfig& c) {
#define BEAMFL_GET(field) c.field = j.value(#field, c.field)
  BEAMFL_GET(num_antennas);
  BEAMFL_GET(num_beams);
  BEAMFL_GET(num_vehicles);
  BEAMFL_GET(samples_per_vehicle);
  BEAMFL_GET(x_min);
  BEAMFL_GET(x_max);
  BEAMFL_GET(y_min);
  BEAMFL_GET(y_max);
  BEAMFL_GET(lane_jitter);
  BEAMFL_GET(max_obstacles);
  BEAMFL_GET(obstacle_min_size);
  BEAMFL_GET(obstacle_max_size);
  BEAMFL_GET(obstacle_min_height);
  BEAMFL_GET(obstacle_max_height);
  BEAMFL_GET(vehicle_height);
  BEAMFL_GET(bs_height);
  BEAMFL_GET(num_reflectors);
  BEAMFL_GET(reflection_loss_db);
  BEAMFL_GET(gps_noise_std);
  BEAMFL_GET(noise_power);
  BEAMFL_GET(tx_power);
  BEAMFL_GET(rgb_dims);
  BEAMFL_GET(lidar_dims);
  BEAMFL_GET(seed);
#undef BEAMFL_GET
}

double Codebook::direction(std::size_t m) const {
  return -1.0 + 2.0 * static_cast<double>(m) / static_cast<double>(beams.size());
}

std::vector<cplx> steering_vector(std::size_t num_antennas, double sin_theta) {
  std::vector<cplx> a(num_antennas);
  for (std::size_t n = 0; n < num_antennas; ++n) {
    a[n] = std::polar(1.0, std::numbers::pi * static_cast<double>(n) * sin_theta);
  }
  return a;
}

Codebook make_dft_codebook(std::size_t num_antennas, std::size_t num_beams) {
  if (num_antennas == 0 || num_beams < 2) throw ConfigError("codebook needs antennas and at least 2 beams");
  Codebook cb;
  cb.num_antennas = num_antennas;
  cb.beams.resize(num_beams);
  const double norm = 1.0 / std::sqrt(static_cast<double>(num_antennas));
  for (std::size_t m = 0; m < num_beams; ++m) {
    const double u = -1.0 + 2.0 * static_cast<double>(m) / static_cast<double>(num_beams);
    cb.beams[m] = steering_vector(num_antennas, u);
    for (cplx& c : cb.beams[m]) c *= norm;
  }
  return cb;
}

cplx inner(std::span<const cplx> h, std::span<const cplx> w) {
  if (h.size() != w.size()) throw InputError("channel and beam lengths differ");
  cplx acc{0.0, 0.0};
  for (std::size_t n = 0; n < h.size(); ++n) acc += std::conj(h[n]) * w[n];
  return acc;
}

std::size_t best_beam(std::span<const cplx> h, const Codebook& codebook) {
  std::size_t best = 0;
  double best_gain = -1.0;
  for (std::size_t m = 0; m < codebook.size(); ++m) {
    const double g = std::abs(inner(h, codebook.beams[m]));
    if (g > best_gain) {
      best_gain = g;
      best = m;
    }
  }
  return best;
}

bool segment_hits_box(std::array<double, 2> a, std::array<double, 2> b, const Obstacle& box) {
  // Slab clipping on the parametric segment a + t (b - a), t in [0,1].
  double t0 = 0.0;
  double t1 = 1.0;
  const double lo[2] = {box.x0, box.y0};
  const double hi[2] = {box.x1, box.y1};
  for (int axis = 0; axis < 2; ++axis) {
    const double d = b[axis] - a[axis];
    if (std::abs(d) < 1e-15) {
      if (a[axis] < lo[axis] || a[axis] > hi[axis]) return false;
      continue;
    }
    double ta = (lo[axis] - a[axis]) / d;
    double tb = (hi[axis] - a[axis]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

std::vector<cplx> build_channel(WorldSnapshot& world, const ScenarioConfig& config,
                                std::uint64_t phase_seed) {
  std::mt19937_64 rng(phase_seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  world.paths.clear();
  world.los_blocked = std::any_of(world.obstacles.begin(), world.obstacles.end(), [&](const Obstacle& o) {
    return segment_hits_box(world.bs, world.vehicle, o);
  });

  const double vx = world.vehicle[0] - world.bs[0];
  const double vy = world.vehicle[1] - world.bs[1];
  const double los_phase = phase(rng);
  if (!world.los_blocked) {
    const double d = std::hypot(vx, vy);
    world.paths.push_back({sin_angle(vx, vy), std::polar(1.0 / d, los_phase), true});
  }

  const double reflect = std::pow(10.0, -config.reflection_loss_db / 20.0);
  std::vector<PathInfo> bounces;
  for (const Obstacle& o : world.obstacles) {
    const auto p = closest_point(o, world.bs);
    const double d1 = std::hypot(p[0] - world.bs[0], p[1] - world.bs[1]);
    const double d2 = std::hypot(world.vehicle[0] - p[0], world.vehicle[1] - p[1]);
    const double ph = phase(rng);
    if (d1 <= 0.0) continue;
    bounces.push_back({sin_angle(p[0] - world.bs[0], p[1] - world.bs[1]),
                       std::polar(reflect / (d1 + d2), ph), false});
  }
  std::stable_sort(bounces.begin(), bounces.end(), [](const PathInfo& a, const PathInfo& b) {
    return std::abs(a.gain) > std::abs(b.gain);
  });
  if (bounces.size() > config.num_reflectors) bounces.resize(config.num_reflectors);
  world.paths.insert(world.paths.end(), bounces.begin(), bounces.end());

  std::vector<cplx> h(config.num_antennas, cplx{0.0, 0.0});
  for (const PathInfo& path : world.paths) {
    const auto a = steering_vector(config.num_antennas, path.sin_theta);
    for (std::size_t n = 0; n < h.size(); ++n) h[n] += path.gain * a[n];
  }
  return h;
}

std::vector<double> render_lidar(const WorldSnapshot& world, const ScenarioConfig& config) {
  const auto [nz, ny, nx] = config.lidar_dims;
  std::vector<double> grid(nz * ny * nx, kLidarEmpty);
  const double dx = (config.x_max - config.x_min) / static_cast<double>(nx);
  const double dy = config.y_max / static_cast<double>(ny);
  const double dz = config.obstacle_max_height / static_cast<double>(nz);
  auto index = [&](std::size_t z, std::size_t y, std::size_t x) { return (z * ny + y) * nx + x; };

  for (const Obstacle& o : world.obstacles) {
    for (std::size_t y = 0; y < ny; ++y) {
      const double cy0 = dy * static_cast<double>(y);
      if (o.y1 < cy0 || o.y0 > cy0 + dy) continue;
      for (std::size_t x = 0; x < nx; ++x) {
        const double cx0 = config.x_min + dx * static_cast<double>(x);
        if (o.x1 < cx0 || o.x0 > cx0 + dx) continue;
        for (std::size_t z = 0; z < nz; ++z) {
          if (dz * static_cast<double>(z) < o.height) grid[index(z, y, x)] = kLidarObstacle;
        }
      }
    }
  }
  const std::size_t tx = index(nz - 1, bin_of(world.bs[1], 0.0, config.y_max, ny),
                               bin_of(world.bs[0], config.x_min, config.x_max, nx));
  const std::size_t rx = index(0, bin_of(world.vehicle[1], 0.0, config.y_max, ny),
                               bin_of(world.vehicle[0], config.x_min, config.x_max, nx));
  grid[tx] = kLidarTransmitter;
  grid[rx] = kLidarReceiver;
  return grid;
}

std::vector<double> render_rgb(const WorldSnapshot& world, const ScenarioConfig& config) {
  const auto [rows, cols] = config.rgb_dims;
  std::vector<double> img(rows * cols, 0.0);
  const double band = config.obstacle_max_height / static_cast<double>(rows);

  // Azimuth columns cover sin(theta) in [-1, 1]; row 0 is the top band.
  auto paint = [&](const Obstacle& box, double sign) {
    const std::array<std::array<double, 2>, 4> corners = {{{box.x0, box.y0}, {box.x1, box.y0},
                                                           {box.x0, box.y1}, {box.x1, box.y1}}};
    double s_lo = 1.0, s_hi = -1.0;
    for (const auto& c : corners) {
      const double s = sin_angle(c[0] - world.bs[0], c[1] - world.bs[1]);
      s_lo = std::min(s_lo, s);
      s_hi = std::max(s_hi, s);
    }
    const auto near = closest_point(box, world.bs);
    const double dist = std::hypot(near[0] - world.bs[0], near[1] - world.bs[1]);
    const double intensity = 1.0 / (1.0 + dist / 20.0);
    const std::size_t c_lo = bin_of(s_lo, -1.0, 1.0, cols);
    const std::size_t c_hi = bin_of(s_hi, -1.0, 1.0, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const double band_floor = band * static_cast<double>(rows - 1 - r);
      if (band_floor >= box.height) continue;
      for (std::size_t c = c_lo; c <= c_hi; ++c) {
        double& px = img[r * cols + c];
        if (intensity > std::abs(px)) px = sign * intensity;
      }
    }
  };
  for (const Obstacle& o : world.obstacles) paint(o, 1.0);
  const Obstacle self{world.vehicle[0] - 1.0, world.vehicle[1] - 1.0, world.vehicle[0] + 1.0,
                      world.vehicle[1] + 1.0, config.vehicle_height};
  // The served vehicle shows up in its own "colour" (negative intensity).
  paint(self, -1.0);
  return img;
}

bool lidar_is_valid(std::span<const double> lidar) {
  std::size_t tx = 0, rx = 0;
  for (double v : lidar) {
    if (v == kLidarTransmitter) {
      ++tx;
    } else if (v == kLidarReceiver) {
      ++rx;
    } else if (v != kLidarEmpty && v != kLidarObstacle) {
      return false;
    }
  }
  return tx == 1 && rx == 1;
}

std::vector<std::vector<std::size_t>> Dataset::ids_by_vehicle() const {
  std::vector<std::vector<std::size_t>> out(manifest.num_vehicles);
  for (const Sample& s : samples) {
    if (s.vehicle >= out.size()) out.resize(s.vehicle + 1);
    out[s.vehicle].push_back(s.id);
  }
  return out;
}

Scenario generate_scenario(const ScenarioConfig& config_in, std::uint64_t seed) {
  ScenarioConfig config = config_in;
  config.seed = seed;
  config.validate();

  Scenario sc;
  sc.config = config;
  sc.codebook = make_dft_codebook(config.num_antennas, config.num_beams);
  DatasetManifest& man = sc.dataset.manifest;
  man.num_vehicles = config.num_vehicles;
  man.num_beams = config.num_beams;
  man.num_antennas = config.num_antennas;
  man.rgb_dims = config.rgb_dims;
  man.lidar_dims = config.lidar_dims;
  man.samples_per_vehicle.assign(config.num_vehicles, config.samples_per_vehicle);
  man.seed = seed;
  man.noise_power = config.noise_power;
  man.tx_power = config.tx_power;

  const std::size_t total = config.num_vehicles * config.samples_per_vehicle;
  sc.dataset.samples.reserve(total);
  sc.worlds.reserve(total);

  const double span_y = config.y_max - config.y_min;
  for (std::size_t v = 0; v < config.num_vehicles; ++v) {
    // Each vehicle drives its own lane, which skews its label mix.
    const double frac = config.num_vehicles > 1
                            ? static_cast<double>(v) / static_cast<double>(config.num_vehicles - 1)
                            : 0.5;
    const double lane_y = config.y_min + 0.1 * span_y + 0.8 * span_y * frac;
    for (std::size_t k = 0; k < config.samples_per_vehicle; ++k) {
      std::mt19937_64 rng(derive_seed(seed, v, k));
      std::uniform_real_distribution<double> ux(config.x_min, config.x_max);
      std::uniform_real_distribution<double> uy(config.y_min, config.y_max);
      std::normal_distribution<double> jitter(0.0, config.lane_jitter);
      std::uniform_real_distribution<double> size(config.obstacle_min_size, config.obstacle_max_size);
      std::uniform_real_distribution<double> height(config.obstacle_min_height, config.obstacle_max_height);
      std::uniform_int_distribution<std::size_t> count(0, config.max_obstacles);

      WorldSnapshot world;
      do {
        world.vehicle = {ux(rng), std::clamp(lane_y + jitter(rng), config.y_min, config.y_max)};
      } while (std::hypot(world.vehicle[0] - world.bs[0], world.vehicle[1] - world.bs[1]) < 1.0);

      const std::size_t n_obs = count(rng);
      for (std::size_t o = 0; o < n_obs; ++o) {
        Obstacle box;
        for (int attempt = 0; attempt < 32; ++attempt) {
          const double cx = ux(rng), cy = uy(rng), w = size(rng), d = size(rng);
          box = {cx - w / 2, cy - d / 2, cx + w / 2, cy + d / 2, height(rng)};
          const bool covers_vehicle = world.vehicle[0] >= box.x0 - 1.0 && world.vehicle[0] <= box.x1 + 1.0 &&
                                      world.vehicle[1] >= box.y0 - 1.0 && world.vehicle[1] <= box.y1 + 1.0;
          const bool covers_bs = box.y0 <= 1.0;
          if (!covers_vehicle && !covers_bs) break;
          box.height = -1.0;
        }
        if (box.height > 0.0) world.obstacles.push_back(box);
      }

      Sample s;
      s.id = sc.dataset.samples.size();
      s.vehicle = v;
      s.channel = build_channel(world, config, derive_seed(seed ^ 0x5eed, v, k));
      s.line_of_sight = !world.los_blocked;
      s.label = best_beam(s.channel, sc.codebook);
      std::normal_distribution<double> gps_noise(0.0, config.gps_noise_std > 0 ? config.gps_noise_std : 1.0);
      s.gps = {world.vehicle[0] - world.bs[0], world.vehicle[1] - world.bs[1]};
      if (config.gps_noise_std > 0.0) {
        for (double& g : s.gps) g += gps_noise(rng);
      }
      s.lidar = render_lidar(world, config);
      s.rgb = render_rgb(world, config);
      sc.dataset.samples.push_back(std::move(s));
      sc.worlds.push_back(std::move(world));
    }
  }
  return sc;
}

std::vector<std::vector<cplx>> power_scaled_beams(std::span<const std::size_t> beams,
                                                  const Codebook& codebook, double tx_power) {
  std::vector<std::vector<cplx>> out;
  out.reserve(beams.size());
  if (beams.empty()) return out;
  const double scale = std::sqrt(tx_power / static_cast<double>(beams.size()));
  for (std::size_t b : beams) {
    if (b >= codebook.size()) throw InputError("beam index outside the codebook");
    std::vector<cplx> w = codebook.beams[b];
    for (cplx& c : w) c *= scale;
    out.push_back(std::move(w));
  }
  return out;
}

double sum_rate(std::span<const std::vector<cplx>> channels, std::span<const std::size_t> beams,
                const Codebook& codebook, double tx_power, double noise_power) {
  if (channels.size() != beams.size()) throw InputError("one beam per vehicle is required");
  const auto w = power_scaled_beams(beams, codebook, tx_power);
  double total = 0.0;
  for (std::size_t v = 0; v < channels.size(); ++v) {
    const double signal = std::norm(inner(channels[v], w[v]));
    double interference = 0.0;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (i != v) interference += std::norm(inner(channels[v], w[i]));
    }
    total += std::log2(1.0 + signal / (interference + noise_power));
  }
  return total;
}

double sum_rate_ratio(std::span<const std::size_t> chosen, std::span<const Sample* const> samples,
                      const Codebook& codebook, double tx_power, double noise_power,
                      std::size_t users_per_group) {
  if (chosen.size() != samples.size()) throw InputError("one chosen beam per sample is required");
  if (users_per_group == 0) throw InputError("users_per_group must be positive");
  double achieved = 0.0;
  double optimal = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += users_per_group) {
    const std::size_t end = std::min(samples.size(), start + users_per_group);
    std::vector<std::vector<cplx>> h;
    std::vector<std::size_t> pick, best;
    for (std::size_t i = start; i < end; ++i) {
      if (samples[i]->channel.empty()) throw InputError("sample has no channel for sum-rate evaluation");
      h.push_back(samples[i]->channel);
      pick.push_back(chosen[i]);
      best.push_back(samples[i]->label);
    }
    achieved += sum_rate(h, pick, codebook, tx_power, noise_power);
    optimal += sum_rate(h, best, codebook, tx_power, noise_power);
  }
  return optimal > 0.0 ? achieved / optimal : 0.0;
}

ModalBatch make_batch(std::span<const Sample* const> samples, const ArchConfig& arch) {
  ModalBatch b;
  const std::size_t n = samples.size();
  for (Modality q : kAllModalities) {
    b.inputs[index_of(q)] = Tensor::matrix(n, arch.extractor(q).input_dim);
  }
  b.present.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Sample& s = *samples[r];
    b.present[r] = s.mask;
    const std::vector<double>* src[3] = {&s.gps, &s.rgb, &s.lidar};
    for (Modality q : kAllModalities) {
      if (!s.mask.has(q)) continue;
      Tensor& t = b.inputs[index_of(q)];
      const std::vector<double>& v = *src[index_of(q)];
      if (v.size() != t.cols()) {
        throw ConfigError(std::string(modality_name(q)) + " sample width does not match the architecture");
      }
      std::copy(v.begin(), v.end(), t.row(r).begin());
    }
  }
  return b;
}

double sum_rate_ratio(const MultiModalNet& model, std::span<const Sample* const> samples,
                      const Codebook& codebook, double tx_power, double noise_power,
                      std::size_t users_per_group) {
  if (samples.empty()) return 0.0;
  const Prediction p = model.predict(make_batch(samples, model.arch()), Mode::kEval);
  return sum_rate_ratio(p.beams, samples, codebook, tx_power, noise_power, users_per_group);
}

}  // namespace beamfl
