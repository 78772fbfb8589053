#include "beamfl/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>

#include "beamfl/adam.hpp"
#include "beamfl/error.hpp"
#include "beamfl/loss.hpp"

namespace beamfl {
namespace {

std::size_t grid_bin(double v, double lo, double hi, std::size_t bins) {
  if (v <= lo) return 0;
  if (v >= hi) return bins - 1;
  return std::min(static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins)), bins - 1);
}

Mode generator_mode(const GenConfig& config) {
  return config.normalization == GenNormalization::kBatch ? Mode::kTrain : Mode::kEval;
}

void check_pair(const MultiModalNet& global_net, const MultiModalNet& eval_net) {
  if (global_net.arch().num_beams != eval_net.arch().num_beams) {
    throw ConfigError("global and evaluation models disagree on the number of beams");
  }
}

/// Adds the weighted stat distance of every BN layer of `branch` and fills
/// the matching upstream statistic gradients.
double match_branch_stats(const Network& net, const std::vector<BatchStats>& stats, double weight,
                          std::vector<StatGrad>& grads, std::vector<double>& distances) {
  const auto bns = net.bn_layers();
  if (stats.size() != bns.size()) throw InputError("batch statistics missing for a BN layer");
  grads.assign(bns.size(), {});
  double total = 0.0;
  for (std::size_t l = 0; l < bns.size(); ++l) {
    const BNLayerState& bn = *bns[l];
    const BatchStats& s = stats[l];
    StatGrad& g = grads[l];
    g.d_mean.resize(bn.width());
    g.d_var.resize(bn.width());
    double dist = 0.0;
    for (std::size_t c = 0; c < bn.width(); ++c) {
      const double dm = s.mean[c] - bn.running_mean[c];
      const double dv = s.var[c] - bn.running_var[c];
      dist += dm * dm + dv * dv;
      g.d_mean[c] = 2.0 * weight * dm;
      g.d_var[c] = 2.0 * weight * dv;
    }
    distances.push_back(weight * dist);
    total += weight * dist;
  }
  return total;
}

double box_center(const GenBounds& b, std::size_t c) { return 0.5 * (b.gps_min[c] + b.gps_max[c]); }
double box_half(const GenBounds& b, std::size_t c) { return std::max(0.5 * (b.gps_max[c] - b.gps_min[c]), 1e-9); }

/// Latent GPS lives in box-normalized units; the view holds metres.
void project(SynthBatch& view, const GenBounds& bounds, double tau) {
  const std::size_t n = view.size();
  Tensor& gps = view.inputs[index_of(Modality::kGps)];
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < 2 && c < gps.cols(); ++c) {
      const double z = std::clamp(gps(r, c), -1.0, 1.0);
      gps(r, c) = box_center(bounds, c) + box_half(bounds, c) * z;
    }
  }
  Tensor& lidar = view.inputs[index_of(Modality::kLidar)];
  for (std::size_t r = 0; r < n; ++r) {
    auto row = lidar.row(r);
    for (double& v : row) v = v > tau ? 1.0 : 0.0;
    embed_tx_rx(row, view.tx_cells[r], view.rx_cells[r]);
  }
}

bool report_finite(const GenLossReport& r) {
  return std::isfinite(r.total) && std::isfinite(r.bn_term) && std::isfinite(r.hard_label_term) &&
         std::isfinite(r.soft_label_term);
}

std::string describe(const GenLossReport& r, std::size_t iteration) {
  return "generator loss became non-finite at iteration " + std::to_string(iteration) +
         " (bn=" + std::to_string(r.bn_term) + ", hard=" + std::to_string(r.hard_label_term) +
         ", soft=" + std::to_string(r.soft_label_term) + ")";
}

void apply_step(std::span<const std::span<double>> vars, std::span<const std::vector<double>> grads,
                const GenConfig& config, AdamState& adam) {
  if (config.optimizer == GenOptimizer::kAdam) {
    adam.step(vars, grads);
  } else {
    sgd_step(vars, grads, config.lr);
  }
}

}  // namespace

GenBounds generator_bounds(const ScenarioConfig& config) {
  const auto [nz, ny, nx] = config.lidar_dims;
  auto index = [&](std::size_t z, std::size_t y, std::size_t x) { return (z * ny + y) * nx + x; };
  GenBounds b;
  b.tx_cell = index(nz - 1, 0, grid_bin(0.0, config.x_min, config.x_max, nx));
  const std::size_t y_lo = grid_bin(config.y_min, 0.0, config.y_max, ny);
  const std::size_t y_hi = grid_bin(config.y_max, 0.0, config.y_max, ny);
  for (std::size_t y = y_lo; y <= y_hi; ++y) {
    for (std::size_t x = 0; x < nx; ++x) {
      const std::size_t cell = index(0, y, x);
      if (cell != b.tx_cell) b.rx_cells.push_back(cell);
    }
  }
  b.gps_min = {config.x_min, config.y_min};
  b.gps_max = {config.x_max, config.y_max};
  return b;
}

GenBounds bounds_from_samples(std::span<const Sample* const> samples) {
  if (samples.empty()) throw InputError("no samples to derive generator bounds from");
  GenBounds b;
  std::map<std::size_t, std::size_t> tx_votes;
  std::set<std::size_t> rx;
  b.gps_min = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  b.gps_max = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Sample* s : samples) {
    for (std::size_t c = 0; c < 2 && c < s->gps.size(); ++c) {
      b.gps_min[c] = std::min(b.gps_min[c], s->gps[c]);
      b.gps_max[c] = std::max(b.gps_max[c], s->gps[c]);
    }
    for (std::size_t i = 0; i < s->lidar.size(); ++i) {
      if (s->lidar[i] == kLidarTransmitter) ++tx_votes[i];
      if (s->lidar[i] == kLidarReceiver) rx.insert(i);
    }
  }
  if (tx_votes.empty() || rx.empty()) throw InputError("samples carry no TX/RX markers");
  b.tx_cell = std::max_element(tx_votes.begin(), tx_votes.end(), [](const auto& a, const auto& c) {
                return a.second < c.second;
              })->first;
  rx.erase(b.tx_cell);
  if (rx.empty()) throw InputError("no RX cell distinct from the TX cell");
  b.rx_cells.assign(rx.begin(), rx.end());
  return b;
}

std::vector<double> binarize(std::span<const double> x, double tau) {
  std::vector<double> out(x.size());
  std::transform(x.begin(), x.end(), out.begin(), [tau](double v) { return v > tau ? 1.0 : 0.0; });
  return out;
}

void embed_tx_rx(std::span<double> grid, std::size_t tx_cell, std::size_t rx_cell) {
  if (tx_cell >= grid.size() || rx_cell >= grid.size()) throw InputError("TX/RX cell outside the LiDAR grid");
  if (tx_cell == rx_cell) throw InputError("TX and RX cells must differ");
  for (double& v : grid) {
    if (v < 0.0) v = kLidarEmpty;
  }
  grid[tx_cell] = kLidarTransmitter;
  grid[rx_cell] = kLidarReceiver;
}

ModalBatch synth_model_batch(const SynthBatch& batch) {
  ModalBatch mb;
  const std::size_t n = batch.size();
  mb.inputs = batch.inputs;
  if (batch.mode == SynthMode::kGenerate) {
    mb.present = batch.present.empty() ? std::vector<ModalityMask>(n, ModalityMask::all()) : batch.present;
  } else {
    mb.present = batch.present;
    mb.fills = batch.fills;
    mb.filled = batch.missing;
  }
  return mb;
}

GenLossResult gen_loss(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                       const SynthBatch& batch, const GenConfig& config) {
  check_pair(global_net, eval_net);
  const std::size_t n = batch.size();
  if (n < 2) throw InputError("generator batches need at least 2 samples for batch statistics");
  const std::size_t m = global_net.arch().num_beams;
  for (std::size_t t : batch.targets) {
    if (t >= m) throw InputError("generator target label outside [1, M]");
  }

  const ModalBatch mb = synth_model_batch(batch);
  const ModelForward fwd = global_net.run(mb, generator_mode(config));

  GenLossResult out;
  GenLossReport& rep = out.report;
  BranchStatGrads stat_grads;
  for (BranchId b : kAllBranches) {
    if (batch.mode == SynthMode::kFill && b != BranchId::kIntegration) continue;
    const auto& stats = fwd.stats[index_of(b)];
    if (stats.empty()) continue;
    rep.bn_term += match_branch_stats(global_net.branch(b), stats, config.bn_weight,
                                      stat_grads[index_of(b)], rep.layer_distances);
  }

  const LossAndGrad hard = softmax_cross_entropy(fwd.logits, one_hot(batch.targets, m));
  rep.hard_label_term = config.hard_weight * hard.loss;
  Tensor dlogits = hard.grad;
  for (double& g : dlogits.values()) g *= config.hard_weight;

  if (config.soft_weight != 0.0) {
    const Tensor soft_targets = softmax(eval_net.run(mb, Mode::kEval).logits);
    const LossAndGrad soft = softmax_cross_entropy(fwd.logits, soft_targets);
    rep.soft_label_term = config.soft_weight * soft.loss;
    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] += config.soft_weight * soft.grad[i];
  }
  rep.total = rep.bn_term + rep.hard_label_term + rep.soft_label_term;
  if (!report_finite(rep)) return out;

  ModelGrads grads = global_net.backward(fwd, dlogits, stat_grads, batch.mode == SynthMode::kGenerate);
  if (batch.mode == SynthMode::kGenerate) {
    out.input_grads = std::move(grads.inputs);
  } else {
    for (Modality q : kAllModalities) {
      const std::size_t qi = index_of(q);
      if (batch.fills[qi].empty()) continue;
      const std::size_t off = global_net.arch().feature_offset(q);
      const std::size_t w = global_net.arch().extractor(q).feature_dim;
      Tensor g = Tensor::matrix(n, w);
      for (std::size_t r = 0; r < n; ++r) {
        if (!batch.missing[r].has(q) || batch.present[r].has(q)) continue;
        auto src = grads.fused.row(r).subspan(off, w);
        std::copy(src.begin(), src.end(), g.row(r).begin());
      }
      out.fill_grads[qi] = std::move(g);
    }
  }
  return out;
}

SynthResult synthesize(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                       std::span<const std::size_t> targets, const GenBounds& bounds,
                       const GenConfig& config, const GenObserver& observer, ModalityMask modalities) {
  check_pair(global_net, eval_net);
  if (modalities.empty()) throw InputError("synthesis needs at least one modality");
  const ArchConfig& arch = global_net.arch();
  const std::size_t n = targets.size();
  if (n < 2) throw InputError("generator batches need at least 2 samples for batch statistics");
  if (bounds.rx_cells.empty()) throw ConfigError("no RX cells available for synthetic LiDAR");
  if (!(config.lr >= 0.0)) throw ConfigError("generator learning rate must be non-negative");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_rx(0, bounds.rx_cells.size() - 1);

  SynthBatch latent;
  latent.mode = SynthMode::kGenerate;
  latent.targets.assign(targets.begin(), targets.end());
  latent.present.assign(n, modalities);
  for (Modality q : kAllModalities) {
    Tensor t = Tensor::matrix(n, arch.extractor(q).input_dim);
    for (double& v : t.values()) v = gauss(rng);
    latent.inputs[index_of(q)] = std::move(t);
  }
  for (std::size_t r = 0; r < n; ++r) {
    latent.tx_cells.push_back(bounds.tx_cell);
    latent.rx_cells.push_back(bounds.rx_cells[pick_rx(rng)]);
  }

  // The model always sees the projected view; gradients taken there are
  // applied to the continuous latent (straight-through for LiDAR).
  auto clamp_latent_gps = [&latent]() {
    for (double& z : latent.inputs[index_of(Modality::kGps)].values()) z = std::clamp(z, -1.0, 1.0);
  };
  clamp_latent_gps();
  SynthBatch view = latent;
  project(view, bounds, config.threshold);

  AdamState adam(AdamConfig{config.lr, 0.9, 0.999, 1e-8});
  SynthResult result;
  SynthBatch best = view;

  for (std::size_t it = 0;; ++it) {
    if (observer) observer(it, view);
    GenLossResult lr = gen_loss(global_net, eval_net, view, config);
    if (!report_finite(lr.report)) throw DivergenceError(describe(lr.report, it));
    if (it == 0) result.initial = lr.report;
    result.last = lr.report;
    if (it == 0 || lr.report.total < result.best.total) {
      result.best = lr.report;
      result.best_iteration = it;
      best = view;
    }
    if (it == config.epochs) break;

    std::vector<std::span<double>> vars;
    std::vector<std::vector<double>> grads;
    for (Modality q : kAllModalities) {
      if (!modalities.has(q)) continue;
      vars.push_back(latent.inputs[index_of(q)].values());
      grads.push_back(lr.input_grads[index_of(q)].storage());
      if (q == Modality::kGps) {
        std::vector<double>& g = grads.back();
        const std::size_t w = latent.inputs[index_of(q)].cols();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= box_half(bounds, i % w);
      }
    }
    apply_step(vars, grads, config, adam);
    clamp_latent_gps();
    view = latent;
    project(view, bounds, config.threshold);
  }

  for (std::size_t r = 0; r < n; ++r) {
    Sample s;
    s.id = r;
    const auto gps = best.inputs[index_of(Modality::kGps)].row(r);
    const auto rgb = best.inputs[index_of(Modality::kRgb)].row(r);
    const auto lidar = best.inputs[index_of(Modality::kLidar)].row(r);
    s.gps.assign(gps.begin(), gps.end());
    s.rgb.assign(rgb.begin(), rgb.end());
    s.lidar.assign(lidar.begin(), lidar.end());
    s.label = best.targets[r];
    s.mask = modalities;
    s.synthetic = true;
    s.line_of_sight = false;
    result.samples.push_back(std::move(s));
  }
  return result;
}

bool FillResult::any() const {
  return std::any_of(filled.begin(), filled.end(), [](ModalityMask m) { return !m.empty(); });
}

FillResult fill_missing_modality(const MultiModalNet& global_net, const MultiModalNet& eval_net,
                                 const ModalBatch& data, std::span<const std::size_t> labels,
                                 const GenConfig& config) {
  check_pair(global_net, eval_net);
  const ArchConfig& arch = global_net.arch();
  const std::size_t n = data.size();
  if (labels.size() != n) throw InputError("one label per sample is required");

  FillResult result;
  result.filled.assign(n, ModalityMask::none());
  bool needed = false;
  for (std::size_t r = 0; r < n; ++r) {
    if (data.present[r].empty()) throw InputError("sample " + std::to_string(r) + " has no modality to keep");
    result.filled[r] = data.present[r].complement();
    needed = needed || !result.filled[r].empty();
  }
  if (!needed) return result;

  SynthBatch batch;
  batch.mode = SynthMode::kFill;
  batch.inputs = data.inputs;
  batch.present = data.present;
  batch.missing = result.filled;
  batch.targets.assign(labels.begin(), labels.end());
  for (Modality q : kAllModalities) {
    const bool anyone = std::any_of(batch.missing.begin(), batch.missing.end(),
                                    [q](ModalityMask m) { return m.has(q); });
    if (anyone) batch.fills[index_of(q)] = Tensor::matrix(n, arch.extractor(q).feature_dim);
  }

  AdamState adam(AdamConfig{config.lr, 0.9, 0.999, 1e-8});
  auto best_fills = batch.fills;
  for (std::size_t it = 0;; ++it) {
    GenLossResult lr = gen_loss(global_net, eval_net, batch, config);
    if (!report_finite(lr.report)) throw DivergenceError(describe(lr.report, it));
    if (it == 0) result.initial = lr.report;
    if (it == 0 || lr.report.total < result.best.total) {
      result.best = lr.report;
      best_fills = batch.fills;
    }
    if (it == config.epochs) break;

    std::vector<std::span<double>> vars;
    std::vector<std::vector<double>> grads;
    for (Modality q : kAllModalities) {
      const std::size_t qi = index_of(q);
      if (batch.fills[qi].empty()) continue;
      vars.push_back(batch.fills[qi].values());
      grads.push_back(lr.fill_grads[qi].storage());
    }
    apply_step(vars, grads, config, adam);
    for (Modality q : kAllModalities) {
      Tensor& f = batch.fills[index_of(q)];
      if (f.empty()) continue;
      for (std::size_t r = 0; r < n; ++r) {
        for (double& v : f.row(r)) v = batch.missing[r].has(q) ? std::max(v, 0.0) : 0.0;
      }
    }
  }
  result.fills = std::move(best_fills);
  return result;
}

}  // namespace beamfl
