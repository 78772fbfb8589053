#include "beamfl/beam_model.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <random>
#include <string>

#include "beamfl/error.hpp"
#include "beamfl/loss.hpp"

namespace beamfl {

const char* modality_name(Modality q) {
  switch (q) {
    case Modality::kGps: return "GPS";
    case Modality::kRgb: return "RGB";
    case Modality::kLidar: return "LiDAR";
  }
  return "?";
}

const char* branch_name(BranchId b) {
  switch (b) {
    case BranchId::kGps: return "gps";
    case BranchId::kRgb: return "rgb";
    case BranchId::kLidar: return "lidar";
    case BranchId::kIntegration: return "integration";
  }
  return "?";
}

std::string ModalityMask::str() const {
  std::string s = "---";
  if (has(Modality::kGps)) s[0] = 'G';
  if (has(Modality::kRgb)) s[1] = 'R';
  if (has(Modality::kLidar)) s[2] = 'L';
  return s;
}

ModalityMask ModalityMask::parse(std::string_view text) {
  if (text.size() != 3) throw InputError("modality mask must have 3 characters: " + std::string(text));
  ModalityMask m;
  const char on[3] = {'G', 'R', 'L'};
  for (std::size_t i = 0; i < 3; ++i) {
    if (text[i] == on[i]) {
      m.set(kAllModalities[i], true);
    } else if (text[i] != '-') {
      throw InputError("bad modality mask: " + std::string(text));
    }
  }
  return m;
}

const ExtractorConfig& ArchConfig::extractor(Modality q) const {
  switch (q) {
    case Modality::kGps: return gps;
    case Modality::kRgb: return rgb;
    case Modality::kLidar: return lidar;
  }
  return gps;
}

ExtractorConfig& ArchConfig::extractor(Modality q) {
  return const_cast<ExtractorConfig&>(std::as_const(*this).extractor(q));
}

std::size_t ArchConfig::fused_dim() const {
  return gps.feature_dim + rgb.feature_dim + lidar.feature_dim;
}

std::size_t ArchConfig::feature_offset(Modality q) const {
  std::size_t off = 0;
  for (Modality m : kAllModalities) {
    if (m == q) return off;
    off += extractor(m).feature_dim;
  }
  return off;
}

void ArchConfig::validate() const {
  for (Modality q : kAllModalities) {
    const ExtractorConfig& e = extractor(q);
    if (e.input_dim == 0 || e.feature_dim == 0) {
      throw ConfigError(std::string(modality_name(q)) + " branch has a zero dimension");
    }
    for (std::size_t h : e.hidden) {
      if (h == 0) throw ConfigError(std::string(modality_name(q)) + " branch has a zero hidden width");
    }
  }
  for (std::size_t h : integration_hidden) {
    if (h == 0) throw ConfigError("integration branch has a zero hidden width");
  }
  if (num_beams < 2) throw ConfigError("codebook needs at least 2 beams");
}

bool operator==(const ArchConfig& a, const ArchConfig& b) {
  auto same = [](const ExtractorConfig& x, const ExtractorConfig& y) {
    return x.input_dim == y.input_dim && x.hidden == y.hidden && x.feature_dim == y.feature_dim;
  };
  return same(a.gps, b.gps) && same(a.rgb, b.rgb) && same(a.lidar, b.lidar) &&
         a.integration_hidden == b.integration_hidden && a.num_beams == b.num_beams &&
         a.seed == b.seed && a.bn.momentum == b.bn.momentum && a.bn.eps == b.bn.eps;
}

namespace {

void extractor_to_json(nlohmann::json& j, const ExtractorConfig& e) {
  j = {{"input_dim", e.input_dim}, {"hidden", e.hidden}, {"feature_dim", e.feature_dim}};
}

void extractor_from_json(const nlohmann::json& j, ExtractorConfig& e) {
  e.input_dim = j.value("input_dim", e.input_dim);
  e.hidden = j.value("hidden", e.hidden);
  e.feature_dim = j.value("feature_dim", e.feature_dim);
}

}  // namespace

void to_json(nlohmann::json& j, const ArchConfig& a) {
  nlohmann::json g, r, l;
  extractor_to_json(g, a.gps);
  extractor_to_json(r, a.rgb);
  extractor_to_json(l, a.lidar);
  j = {{"gps", g},
       {"rgb", r},
       {"lidar", l},
       {"integration_hidden", a.integration_hidden},
       {"num_beams", a.num_beams},
       {"seed", a.seed},
       {"bn_momentum", a.bn.momentum},
       {"bn_eps", a.bn.eps}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  if (j.contains("gps")) extractor_from_json(j.at("gps"), a.gps);
  if (j.contains("rgb")) extractor_from_json(j.at("rgb"), a.rgb);
  if (j.contains("lidar")) extractor_from_json(j.at("lidar"), a.lidar);
  a.integration_hidden = j.value("integration_hidden", a.integration_hidden);
  a.num_beams = j.value("num_beams", a.num_beams);
  a.seed = j.value("seed", a.seed);
  a.bn.momentum = j.value("bn_momentum", a.bn.momentum);
  a.bn.eps = j.value("bn_eps", a.bn.eps);
}

std::vector<LayerSpec> extractor_layer_specs(const ExtractorConfig& cfg) {
  std::vector<LayerSpec> specs;
  std::size_t width = cfg.input_dim;
  auto block = [&](std::size_t out) {
    specs.push_back({LayerKind::kDense, width, out});
    specs.push_back({LayerKind::kBatchNorm, out, out});
    specs.push_back({LayerKind::kRelu, out, out});
    width = out;
  };
  for (std::size_t h : cfg.hidden) block(h);
  block(cfg.feature_dim);
  return specs;
}

std::vector<LayerSpec> integration_layer_specs(std::size_t fused_dim,
                                               std::span<const std::size_t> hidden,
                                               std::size_t num_beams) {
  std::vector<LayerSpec> specs;
  std::size_t width = fused_dim;
  for (std::size_t h : hidden) {
    specs.push_back({LayerKind::kDense, width, h});
    specs.push_back({LayerKind::kBatchNorm, h, h});
    specs.push_back({LayerKind::kRelu, h, h});
    width = h;
  }
  specs.push_back({LayerKind::kDense, width, num_beams});
  return specs;
}

ParamCounts expected_counts(const ArchConfig& arch, BranchId branch) {
  std::vector<LayerSpec> specs =
      branch == BranchId::kIntegration
          ? integration_layer_specs(arch.fused_dim(), arch.integration_hidden, arch.num_beams)
          : extractor_layer_specs(arch.extractor(static_cast<Modality>(index_of(branch))));
  ParamCounts c;
  for (const LayerSpec& s : specs) {
    if (s.kind == LayerKind::kDense) {
      c.trainable += s.fan_in * s.fan_out + s.fan_out;
      c.state += s.fan_in * s.fan_out + s.fan_out;
    } else if (s.kind == LayerKind::kBatchNorm) {
      c.trainable += 2 * s.fan_out;
      c.state += 4 * s.fan_out;
    }
  }
  return c;
}

Tensor fuse_features(const ArchConfig& arch, const std::array<const Tensor*, kNumModalities>& features,
                     std::span<const ModalityMask> available) {
  const std::size_t n = available.size();
  Tensor fused = Tensor::matrix(n, arch.fused_dim());
  for (Modality q : kAllModalities) {
    const Tensor* f = features[index_of(q)];
    const std::size_t off = arch.feature_offset(q);
    const std::size_t w = arch.extractor(q).feature_dim;
    for (std::size_t r = 0; r < n; ++r) {
      if (!available[r].has(q)) continue;
      if (f == nullptr || f->rows() != n || f->cols() != w) {
        throw InputError(std::string(modality_name(q)) + " features do not match configured width");
      }
      std::copy_n(f->row(r).begin(), w, fused.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    }
  }
  return fused;
}

MultiModalNet MultiModalNet::build(const ArchConfig& arch) {
  arch.validate();
  MultiModalNet net;
  net.arch_ = arch;
  std::mt19937_64 rng(arch.seed);
  for (Modality q : kAllModalities) {
    const auto specs = extractor_layer_specs(arch.extractor(q));
    net.branches_[index_of(q)] = Network::build(specs, rng, arch.bn);
  }
  const auto specs = integration_layer_specs(arch.fused_dim(), arch.integration_hidden, arch.num_beams);
  net.branches_[index_of(BranchId::kIntegration)] = Network::build(specs, rng, arch.bn);
  return net;
}

ModelForward MultiModalNet::run(const ModalBatch& batch, Mode mode) const {
  const std::size_t n = batch.size();
  if (n == 0) throw InputError("empty batch");
  if (!batch.filled.empty() && batch.filled.size() != n) throw InputError("fill mask size mismatch");

  ModelForward out;
  out.trace.fused = Tensor::matrix(n, arch_.fused_dim());
  for (Modality q : kAllModalities) {
    const std::size_t qi = index_of(q);
    const std::size_t off = arch_.feature_offset(q);
    const std::size_t w = arch_.extractor(q).feature_dim;
    std::vector<std::size_t>& rows = out.trace.rows[qi];
    for (std::size_t r = 0; r < n; ++r) {
      if (batch.present[r].has(q)) rows.push_back(r);
    }
    if (!rows.empty()) {
      const Tensor& in = batch.inputs[qi];
      if (in.rows() != n || in.cols() != arch_.extractor(q).input_dim) {
        throw ConfigError(std::string(modality_name(q)) + " input does not match branch fan_in");
      }
      // A lone row has no batch variance; fall back to running statistics.
      const Mode m = rows.size() == 1 ? Mode::kEval : mode;
      ForwardResult fr = branches_[qi].run(in.gather_rows(rows), m);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy_n(fr.output.row(k).begin(), w,
                    out.trace.fused.row(rows[k]).begin() + static_cast<std::ptrdiff_t>(off));
      }
      if (m == mode) out.stats[qi] = std::move(fr.batch_stats);
      out.trace.extractor[qi] = std::move(fr.trace);
    }
    if (!batch.filled.empty() && !batch.fills[qi].empty()) {
      const Tensor& fill = batch.fills[qi];
      for (std::size_t r = 0; r < n; ++r) {
        if (batch.present[r].has(q) || !batch.filled[r].has(q)) continue;
        std::copy_n(fill.row(r).begin(), w,
                    out.trace.fused.row(r).begin() + static_cast<std::ptrdiff_t>(off));
      }
    }
  }
  const std::size_t ii = index_of(BranchId::kIntegration);
  ForwardResult fr = branches_[ii].run(out.trace.fused, mode);
  out.logits = std::move(fr.output);
  out.stats[ii] = std::move(fr.batch_stats);
  out.trace.integration = std::move(fr.trace);
  return out;
}

ModelForward MultiModalNet::forward(const ModalBatch& batch, Mode mode) {
  ModelForward fwd = run(batch, mode);
  if (mode == Mode::kTrain) commit_running_stats(fwd);
  return fwd;
}

void MultiModalNet::commit_running_stats(const ModelForward& fwd) {
  for (BranchId b : kAllBranches) {
    const auto& stats = fwd.stats[index_of(b)];
    if (!stats.empty()) branches_[index_of(b)].commit_running_stats(stats);
  }
}

ModelGrads MultiModalNet::backward(const ModelForward& fwd, const Tensor& grad_logits,
                                   const BranchStatGrads& stat_grads, bool want_input_grads) const {
  ModelGrads grads;
  const std::size_t n = fwd.logits.rows();
  const std::size_t ii = index_of(BranchId::kIntegration);
  GradientSet gi = branches_[ii].backward(fwd.trace.integration, grad_logits, stat_grads[ii], true);
  grads.fused = std::move(gi.input);
  gi.input = Tensor();
  grads.branches[ii] = std::move(gi);

  for (Modality q : kAllModalities) {
    const std::size_t qi = index_of(q);
    if (!fwd.trace.extractor[qi]) continue;
    const std::vector<std::size_t>& rows = fwd.trace.rows[qi];
    const std::size_t off = arch_.feature_offset(q);
    const std::size_t w = arch_.extractor(q).feature_dim;
    Tensor dfeat = Tensor::matrix(rows.size(), w);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto src = grads.fused.row(rows[k]).subspan(off, w);
      std::copy(src.begin(), src.end(), dfeat.row(k).begin());
    }
    GradientSet gq = branches_[qi].backward(*fwd.trace.extractor[qi], dfeat, stat_grads[qi],
                                            want_input_grads);
    if (want_input_grads) {
      Tensor full = Tensor::matrix(n, arch_.extractor(q).input_dim);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy(gq.input.row(k).begin(), gq.input.row(k).end(), full.row(rows[k]).begin());
      }
      grads.inputs[qi] = std::move(full);
      gq.input = Tensor();
    }
    grads.branches[qi] = std::move(gq);
  }
  return grads;
}

Prediction MultiModalNet::predict(const ModalBatch& batch, Mode mode) const {
  Prediction p;
  p.logits = run(batch, mode).logits;
  p.beams = argmax_rows(p.logits);
  return p;
}

std::size_t MultiModalNet::trainable_count() const {
  std::size_t total = 0;
  for (const Network& b : branches_) total += b.trainable_count();
  return total;
}

std::size_t MultiModalNet::state_count() const {
  std::size_t total = 0;
  for (const Network& b : branches_) total += b.state_count();
  return total;
}

std::array<BranchParams, kNumBranches> split_branches(const MultiModalNet& net) {
  std::array<BranchParams, kNumBranches> parts;
  for (BranchId b : kAllBranches) parts[index_of(b)] = BranchParams{b, net.branch(b)};
  return parts;
}

MultiModalNet merge_branches(const ArchConfig& arch, std::span<const BranchParams> parts) {
  arch.validate();
  std::array<bool, kNumBranches> seen{};
  MultiModalNet net;
  net.arch_ = arch;
  for (const BranchParams& p : parts) {
    const std::size_t bi = index_of(p.id);
    if (bi >= kNumBranches) throw ProtocolError("unknown branch id");
    if (seen[bi]) throw ProtocolError(std::string("duplicate branch on merge: ") + branch_name(p.id));
    std::vector<LayerSpec> expected =
        p.id == BranchId::kIntegration
            ? integration_layer_specs(arch.fused_dim(), arch.integration_hidden, arch.num_beams)
            : extractor_layer_specs(arch.extractor(static_cast<Modality>(bi)));
    const std::vector<LayerSpec> got = p.net.specs();
    const bool same = got.size() == expected.size() &&
                      std::equal(got.begin(), got.end(), expected.begin(), [](const LayerSpec& a, const LayerSpec& b) {
                        return a.kind == b.kind && a.fan_in == b.fan_in && a.fan_out == b.fan_out;
                      });
    if (!same) throw ProtocolError(std::string("branch shape mismatch on merge: ") + branch_name(p.id));
    seen[bi] = true;
    net.branches_[bi] = p.net;
  }
  for (BranchId b : kAllBranches) {
    if (!seen[index_of(b)]) throw ProtocolError(std::string("missing branch on merge: ") + branch_name(b));
  }
  return net;
}

}  // namespace beamfl
