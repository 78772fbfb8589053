#include "beamfl/federation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <future>
#include <istream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "beamfl/adam.hpp"
#include "beamfl/error.hpp"
#include "beamfl/loss.hpp"
#include "beamfl/seed.hpp"

namespace beamfl {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> flatten_state(const Network& net) {
  std::vector<double> out;
  net.for_each_state([&](std::span<const double> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

void assign_state(Network& net, std::span<const double> values) {
  std::size_t pos = 0;
  net.for_each_state([&](std::span<double> s) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), s.size(), s.begin());
    pos += s.size();
  });
}

std::size_t held_volume(const MultiModalNet& model, const std::array<bool, kNumBranches>& holds) {
  std::size_t n = 0;
  for (BranchId b : kAllBranches) {
    if (holds[index_of(b)]) n += model.branch(b).state_count();
  }
  return n;
}

std::array<bool, kNumBranches> all_branches() { return {true, true, true, true}; }

/// Runs fn(v) for every vehicle, concurrently when asked. Exceptions are
/// rethrown in vehicle order.
template <typename Fn>
void for_each_vehicle(std::size_t count, bool parallel, Fn&& fn) {
  if (!parallel || count < 2) {
    for (std::size_t v = 0; v < count; ++v) fn(v);
    return;
  }
  std::vector<std::future<void>> tasks;
  tasks.reserve(count);
  for (std::size_t v = 0; v < count; ++v) tasks.push_back(std::async(std::launch::async, [&fn, v] { fn(v); }));
  for (auto& t : tasks) t.get();
}

struct Views {
  std::vector<std::vector<LocalItem>> val;  // per vehicle
  std::vector<LocalItem> pooled_val;
  std::vector<LocalItem> test;
  std::vector<const Sample*> test_samples;
};

std::vector<LocalItem> train_items(const Dataset& ds, const VehicleState& v) {
  std::vector<LocalItem> items;
  items.reserve(v.train.size() + v.synthetic.size());
  for (std::size_t i = 0; i < v.train.size(); ++i) {
    const PartitionEntry& e = v.train[i];
    const FillFeatures* fill = nullptr;
    if (i < v.fills.size() &&
        std::any_of(v.fills[i].begin(), v.fills[i].end(), [](const auto& f) { return !f.empty(); })) {
      fill = &v.fills[i];
    }
    items.push_back({&ds.samples.at(e.sample_id), e.mask & v.sensors, fill});
  }
  for (const Sample& s : v.synthetic) items.push_back({&s, s.mask & v.sensors, nullptr});
  return items;
}

double mean_val_loss(const MultiModalNet& model, const Views& views) {
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& items : views.val) {
    if (items.empty()) continue;
    total += evaluate(model, items).loss;
    ++counted;
  }
  return counted == 0 ? kNaN : total / static_cast<double>(counted);
}

std::vector<double> local_accuracies(const MultiModalNet& model, const Views& views) {
  std::vector<double> acc;
  for (const auto& items : views.val) {
    if (!items.empty()) acc.push_back(evaluate(model, items).accuracy);
  }
  return acc;
}

Modality flash_select(const MultiModalNet& model, const std::vector<LocalItem>& pooled_val) {
  Modality best = Modality::kGps;
  double best_acc = -1.0;
  for (Modality q : kAllModalities) {
    std::vector<LocalItem> solo;
    for (const LocalItem& it : pooled_val) {
      const ModalityMask m = it.mask & ModalityMask::only(q);
      if (!m.empty()) solo.push_back({it.sample, m, nullptr});
    }
    if (solo.empty()) continue;
    const double acc = evaluate(model, solo).accuracy;
    if (acc > best_acc) {
      best_acc = acc;
      best = q;
    }
  }
  return best;
}

/// Synthetic samples and fills for one vehicle at a trigger event.
void generate_for_vehicle(VehicleState& v, const Dataset& ds, const MultiModalNet& global,
                          const MultiModalNet& eval_model, const RoundConfig& config, std::size_t round,
                          const GenBounds& fallback_bounds) {
  const ArchConfig& arch = global.arch();
  if (config.generate_labels && !v.train.empty()) {
    std::vector<std::size_t> counts(arch.num_beams, 0);
    std::vector<const Sample*> own;
    for (const PartitionEntry& e : v.train) {
      const Sample& s = ds.samples.at(e.sample_id);
      ++counts.at(s.label);
      if (e.mask.has(Modality::kLidar)) own.push_back(&s);
    }
    const std::vector<std::size_t> gap = sample_shortfall(LabelHistogram(counts));
    const auto cap = static_cast<std::size_t>(config.synth_budget * static_cast<double>(v.train.size()));
    // Round-robin over labels so a cap trims every label evenly.
    std::vector<std::size_t> targets;
    std::vector<std::size_t> left = gap;
    bool progress = true;
    while (targets.size() < cap && progress) {
      progress = false;
      for (std::size_t m = 0; m < left.size() && targets.size() < cap; ++m) {
        if (left[m] == 0) continue;
        --left[m];
        targets.push_back(m);
        progress = true;
      }
    }
    std::sort(targets.begin(), targets.end());

    GenBounds bounds = fallback_bounds;
    if (!own.empty()) bounds = bounds_from_samples(own);
    v.synthetic.clear();
    const std::size_t chunk = std::max<std::size_t>(config.gen_batch, 2);
    for (std::size_t start = 0, k = 0; start < targets.size(); ++k) {
      std::size_t stop = std::min(start + chunk, targets.size());
      if (targets.size() - stop == 1) ++stop;  // never leave a batch of one behind
      if (stop - start < 2) break;
      GenConfig gen = config.gen;
      gen.seed = derive_seed(config.seed ^ 0x67656eull, round, v.id * 1024 + k);
      SynthResult res = synthesize(global, eval_model,
                                   std::span<const std::size_t>(targets).subspan(start, stop - start), bounds,
                                   gen, {}, v.sensors);
      for (Sample& s : res.samples) {
        s.vehicle = v.id;
        v.synthetic.push_back(std::move(s));
      }
      start = stop;
    }
  }

  if (config.fill_modalities && v.train.size() >= 2) {
    std::vector<LocalItem> items;
    std::vector<std::size_t> labels;
    bool missing = false;
    for (const PartitionEntry& e : v.train) {
      const ModalityMask m = e.mask & v.sensors;
      items.push_back({&ds.samples.at(e.sample_id), m, nullptr});
      labels.push_back(ds.samples.at(e.sample_id).label);
      missing = missing || !m.full();
    }
    v.fills.assign(v.train.size(), FillFeatures{});
    if (!missing) return;
    GenConfig gen = config.gen;
    gen.seed = derive_seed(config.seed ^ 0x66696cull, round, v.id);
    const FillResult fr = fill_missing_modality(global, eval_model, make_local_batch(arch, items), labels, gen);
    for (std::size_t i = 0; i < items.size(); ++i) {
      for (Modality q : kAllModalities) {
        const std::size_t qi = index_of(q);
        if (!fr.filled[i].has(q) || fr.fills[qi].empty()) continue;
        const auto row = fr.fills[qi].row(i);
        v.fills[i][qi].assign(row.begin(), row.end());
      }
    }
  }
}

}  // namespace

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kGfl4bs: return "gfl4bs";
    case Protocol::kFedAvg: return "fedavg";
    case Protocol::kFlash: return "flash";
    case Protocol::kCl: return "cl";
  }
  return "?";
}

Protocol parse_protocol(const std::string& text) {
  const std::string t = lower(text);
  for (Protocol p : kAllProtocols) {
    if (t == protocol_name(p)) return p;
  }
  throw ConfigError("unknown protocol '" + text + "' (expected gfl4bs, fedavg, flash or cl)");
}

void RoundConfig::validate() const {
  if (rounds < 1) throw ConfigError("rounds must be at least 1");
  if (local_epochs < 1) throw ConfigError("local epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(synth_budget >= 0.0)) throw ConfigError("synthetic budget must be >= 0");
  if (users_per_group < 1) throw ConfigError("users per group must be at least 1");
  if (!(gen.lr >= 0.0)) throw ConfigError("generator learning rate must be >= 0");
  if (gen_batch < 2) throw ConfigError("generator batch must be at least 2");
}

void to_json(nlohmann::json& j, const RoundConfig& c) {
  j = {{"rounds", c.rounds},
       {"local_epochs", c.local_epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"gamma", c.gamma},
       {"trigger", c.direction == TriggerDirection::kDeclineAbove ? "decline_above" : "decline_below"},
       {"generate_labels", c.generate_labels},
       {"fill_modalities", c.fill_modalities},
       {"max_generations", c.max_generations},
       {"synth_budget", c.synth_budget},
       {"gen_batch", c.gen_batch},
       {"generation",
        {{"epochs", c.gen.epochs},
         {"lr", c.gen.lr},
         {"optimizer", c.gen.optimizer == GenOptimizer::kAdam ? "adam" : "sgd"},
         {"normalization", c.gen.normalization == GenNormalization::kBatch ? "batch" : "running"},
         {"bn_weight", c.gen.bn_weight},
         {"hard_weight", c.gen.hard_weight},
         {"soft_weight", c.gen.soft_weight},
         {"threshold", c.gen.threshold}}},
       {"eval_rounds", c.eval_rounds},
       {"users_per_group", c.users_per_group},
       {"seed", c.seed},
       {"parallel", c.parallel}};
}

void from_json(const nlohmann::json& j, RoundConfig& c) {
  c.rounds = j.value("rounds", c.rounds);
  c.local_epochs = j.value("local_epochs", c.local_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.gamma = j.value("gamma", c.gamma);
  if (j.contains("trigger")) {
    const std::string t = j.at("trigger").get<std::string>();
    if (t == "decline_above") {
      c.direction = TriggerDirection::kDeclineAbove;
    } else if (t == "decline_below") {
      c.direction = TriggerDirection::kDeclineBelow;
    } else {
      throw ConfigError("trigger must be decline_above or decline_below");
    }
  }
  c.generate_labels = j.value("generate_labels", c.generate_labels);
  c.fill_modalities = j.value("fill_modalities", c.fill_modalities);
  c.max_generations = j.value("max_generations", c.max_generations);
  c.synth_budget = j.value("synth_budget", c.synth_budget);
  c.gen_batch = j.value("gen_batch", c.gen_batch);
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    c.gen.epochs = g.value("epochs", c.gen.epochs);
    c.gen.lr = g.value("lr", c.gen.lr);
    if (g.contains("optimizer")) {
      const std::string opt = g.at("optimizer").get<std::string>();
      if (opt != "adam" && opt != "sgd") throw ConfigError("generation optimizer must be adam or sgd");
      c.gen.optimizer = opt == "adam" ? GenOptimizer::kAdam : GenOptimizer::kSgd;
    }
    if (g.contains("normalization")) {
      const std::string norm = g.at("normalization").get<std::string>();
      if (norm != "batch" && norm != "running") throw ConfigError("generation normalization must be batch or running");
      c.gen.normalization = norm == "batch" ? GenNormalization::kBatch : GenNormalization::kRunning;
    }
    c.gen.bn_weight = g.value("bn_weight", c.gen.bn_weight);
    c.gen.hard_weight = g.value("hard_weight", c.gen.hard_weight);
    c.gen.soft_weight = g.value("soft_weight", c.gen.soft_weight);
    c.gen.threshold = g.value("threshold", c.gen.threshold);
  }
  c.eval_rounds = j.value("eval_rounds", c.eval_rounds);
  c.users_per_group = j.value("users_per_group", c.users_per_group);
  c.seed = j.value("seed", c.seed);
  c.parallel = j.value("parallel", c.parallel);
}

std::vector<VehicleState> make_vehicles(const Partition& partition, Protocol protocol) {
  std::vector<VehicleState> out(partition.num_vehicles());
  for (std::size_t v = 0; v < out.size(); ++v) {
    VehicleState& vs = out[v];
    vs.id = v;
    ModalityMask seen = ModalityMask::none();
    for (const PartitionEntry& e : partition.vehicles[v].entries) {
      if (e.role == SplitRole::kTrain) {
        vs.train.push_back(e);
        seen = seen | e.mask;
      } else if (e.role == SplitRole::kVal) {
        vs.val.push_back(e);
      }
    }
    if (vs.train.empty()) throw InputError("vehicle " + std::to_string(v) + " has no training samples");
    // Only the branch-aware protocol restricts what a vehicle holds.
    vs.sensors = protocol == Protocol::kGfl4bs ? seen : ModalityMask::all();
    for (Modality q : kAllModalities) vs.holds[index_of(q)] = vs.sensors.has(q);
    vs.holds[index_of(BranchId::kIntegration)] = true;
    vs.fills.assign(vs.train.size(), FillFeatures{});
  }
  return out;
}

void CommLedger::add(std::size_t round, std::size_t vehicle, std::size_t down, std::size_t up) {
  entries.push_back({round, vehicle, down, up});
}

std::size_t CommLedger::total_down() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.params_down;
  return n;
}

std::size_t CommLedger::total_up() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.params_up;
  return n;
}

std::size_t CommLedger::round_down(std::size_t round) const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.round == round ? e.params_down : 0;
  return n;
}

std::size_t CommLedger::round_up(std::size_t round) const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.round == round ? e.params_up : 0;
  return n;
}

double CommLedger::overhead_ratio(const CommLedger& reference) const {
  const std::size_t ref = reference.total();
  if (ref == 0) throw InputError("reference ledger is empty");
  return static_cast<double>(total()) / static_cast<double>(ref);
}

void CommLedger::write_csv(std::ostream& out) const {
  out << "round,vehicle,params_down,params_up\n";
  for (const auto& e : entries) out << e.round << ',' << e.vehicle << ',' << e.params_down << ',' << e.params_up << '\n';
}

void write_metrics_csv(std::ostream& out, std::span<const RoundMetrics> rows) {
  out << "round,global_acc,mean_local_acc,local_var,dL,triggered,params_up,params_down\n";
  for (const RoundMetrics& r : rows) {
    out << r.round << ',' << fmt_double(r.global_acc) << ',' << fmt_double(r.mean_local_acc) << ','
        << fmt_double(r.local_var) << ',' << fmt_double(r.delta_loss) << ',' << (r.triggered ? 1 : 0) << ','
        << r.params_up << ',' << r.params_down << '\n';
  }
}

std::vector<RoundMetrics> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "round,global_acc,mean_local_acc,local_var,dL,triggered,params_up,params_down") {
    throw LoadError("metrics file has an unexpected header");
  }
  std::vector<RoundMetrics> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw LoadError("metrics line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      RoundMetrics r;
      r.round = std::stoull(f[0]);
      r.global_acc = std::stod(f[1]);
      r.mean_local_acc = std::stod(f[2]);
      r.local_var = std::stod(f[3]);
      r.delta_loss = std::stod(f[4]);
      r.triggered = f[5] == "1";
      r.params_up = std::stoull(f[6]);
      r.params_down = std::stoull(f[7]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw LoadError("metrics line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::optional<double> loss_decline(std::span<const double> history) {
  if (history.size() < 2) return std::nullopt;
  return history[history.size() - 2] - history[history.size() - 1];
}

bool generation_trigger(std::span<const double> history, double gamma, TriggerDirection direction) {
  const auto d = loss_decline(history);
  if (!d || std::isnan(*d)) return false;
  return direction == TriggerDirection::kDeclineAbove ? *d > gamma : *d < gamma;
}

MultiModalNet aggregate(const MultiModalNet& previous, std::span<const Upload> uploads,
                        std::vector<std::string>* warnings) {
  std::array<BranchParams, kNumBranches> parts = split_branches(previous);
  for (BranchId b : kAllBranches) {
    std::vector<const Network*> nets;
    for (const Upload& u : uploads) {
      for (const BranchParams& p : u.branches) {
        if (p.id == b) nets.push_back(&p.net);
      }
    }
    if (nets.empty()) {
      if (warnings != nullptr) warnings->push_back(std::string("no upload for branch ") + branch_name(b) + "; keeping previous");
      continue;
    }
    Network& target = parts[index_of(b)].net;
    const std::size_t width = target.state_count();
    std::vector<long double> acc(width, 0.0L);
    for (const Network* n : nets) {
      if (n->state_count() != width) throw ProtocolError(std::string("upload shape mismatch for branch ") + branch_name(b));
      const std::vector<double> flat = flatten_state(*n);
      for (std::size_t i = 0; i < width; ++i) acc[i] += flat[i];
    }
    std::vector<double> mean(width);
    const auto count = static_cast<long double>(nets.size());
    for (std::size_t i = 0; i < width; ++i) mean[i] = static_cast<double>(acc[i] / count);
    target = *nets.front();
    assign_state(target, mean);
  }
  return merge_branches(previous.arch(), parts);
}

ModalBatch make_local_batch(const ArchConfig& arch, std::span<const LocalItem> items) {
  const std::size_t n = items.size();
  ModalBatch b;
  b.present.reserve(n);
  bool any_fill = false;
  for (Modality q : kAllModalities) b.inputs[index_of(q)] = Tensor::matrix(n, arch.extractor(q).input_dim);
  for (std::size_t r = 0; r < n; ++r) {
    const LocalItem& it = items[r];
    b.present.push_back(it.mask);
    for (Modality q : kAllModalities) {
      if (!it.mask.has(q)) continue;
      const Sample& s = *it.sample;
      const std::vector<double>& src = q == Modality::kGps ? s.gps : (q == Modality::kRgb ? s.rgb : s.lidar);
      auto dst = b.inputs[index_of(q)].row(r);
      if (src.size() != dst.size()) throw InputError(std::string(modality_name(q)) + " sample width does not match the model");
      std::copy(src.begin(), src.end(), dst.begin());
    }
    any_fill = any_fill || it.fill != nullptr;
  }
  if (any_fill) {
    b.filled.assign(n, ModalityMask::none());
    for (std::size_t r = 0; r < n; ++r) {
      const LocalItem& it = items[r];
      if (it.fill == nullptr) continue;
      for (Modality q : kAllModalities) {
        const std::size_t qi = index_of(q);
        const auto& f = (*it.fill)[qi];
        if (it.mask.has(q) || f.empty()) continue;
        if (f.size() != arch.extractor(q).feature_dim) throw InputError("fill feature width does not match the model");
        if (b.fills[qi].empty()) b.fills[qi] = Tensor::matrix(n, arch.extractor(q).feature_dim);
        std::copy(f.begin(), f.end(), b.fills[qi].row(r).begin());
        b.filled[r].set(q, true);
      }
    }
  }
  return b;
}

double local_update(MultiModalNet& model, std::span<const LocalItem> items,
                    const std::array<bool, kNumBranches>& trainable, std::size_t epochs,
                    std::size_t batch_size, double learning_rate, std::uint64_t seed) {
  if (items.empty()) return kNaN;
  const std::size_t n = items.size();
  const std::size_t m = model.arch().num_beams;
  std::array<AdamState, kNumBranches> adam;
  adam.fill(AdamState(AdamConfig{learning_rate, 0.9, 0.999, 1e-8}));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  double last_epoch_loss = kNaN;
  for (std::size_t ep = 0; ep < epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_rows = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t stop = std::min(start + batch_size, n);
      if (stop - start < 2) continue;
      std::vector<LocalItem> batch_items;
      std::vector<std::size_t> labels;
      for (std::size_t k = start; k < stop; ++k) {
        batch_items.push_back(items[order[k]]);
        labels.push_back(items[order[k]].sample->label);
      }
      const ModalBatch batch = make_local_batch(model.arch(), batch_items);
      const ModelForward fwd = model.run(batch, Mode::kTrain);
      const LossAndGrad lg = softmax_cross_entropy(fwd.logits, one_hot(labels, m));
      if (!std::isfinite(lg.loss)) throw DivergenceError("local training loss became non-finite");
      const ModelGrads grads = model.backward(fwd, lg.grad);
      model.commit_running_stats(fwd);
      for (BranchId b : kAllBranches) {
        const std::size_t bi = index_of(b);
        if (!trainable[bi] || !grads.branches[bi]) continue;
        auto params = model.branch(b).parameters();
        adam[bi].step(params, grads.branches[bi]->params);
      }
      loss_sum += lg.loss * static_cast<double>(labels.size());
      loss_rows += labels.size();
    }
    if (loss_rows > 0) last_epoch_loss = loss_sum / static_cast<double>(loss_rows);
  }
  return last_epoch_loss;
}

EvalResult evaluate(const MultiModalNet& model, std::span<const LocalItem> items) {
  EvalResult r;
  r.count = items.size();
  if (items.empty()) return r;
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t start = 0; start < items.size(); start += kChunk) {
    const auto chunk = items.subspan(start, std::min(kChunk, items.size() - start));
    const Tensor logits = model.run(make_local_batch(model.arch(), chunk), Mode::kEval).logits;
    const Tensor p = softmax(logits);
    const std::vector<std::size_t> pred = argmax_rows(logits);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const std::size_t label = chunk[i].sample->label;
      correct += pred[i] == label ? 1 : 0;
      loss -= std::log(std::max(p(i, label), 1e-300));
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
  r.loss = loss / static_cast<double>(items.size());
  return r;
}

double population_variance(std::span<const double> values) {
  if (values.empty()) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double acc = 0.0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(values.size());
}

std::size_t raw_upload_volume(const ArchConfig& arch, std::span<const LocalItem> items) {
  std::size_t n = 0;
  for (const LocalItem& it : items) {
    for (Modality q : kAllModalities) {
      if (it.mask.has(q)) n += arch.extractor(q).input_dim;
    }
    n += 1;
  }
  return n;
}

TransferPrediction predicted_transfer(const ArchConfig& arch, Protocol protocol, ModalityMask sensors,
                                      std::size_t round, std::optional<Modality> flash_branch) {
  auto branch = [&](BranchId b) { return expected_counts(arch, b).state; };
  std::size_t full = 0;
  for (BranchId b : kAllBranches) full += branch(b);
  TransferPrediction t;
  switch (protocol) {
    case Protocol::kGfl4bs: {
      std::size_t held = branch(BranchId::kIntegration);
      for (Modality q : kAllModalities) {
        if (sensors.has(q)) held += branch(branch_of(q));
      }
      t.down = t.up = held;
      break;
    }
    case Protocol::kFedAvg:
      t.down = t.up = full;
      break;
    case Protocol::kFlash:
      t.up = full;
      if (round <= 1 || !flash_branch) {
        t.down = full;
      } else {
        t.down = branch(branch_of(*flash_branch)) + branch(BranchId::kIntegration);
      }
      break;
    case Protocol::kCl:
      throw InputError("centralized learning moves raw data, see raw_upload_volume");
  }
  return t;
}

TrainResult run_training(const Dataset& dataset, const Partition& partition, Protocol protocol,
                         const ArchConfig& arch, const RoundConfig& config, const TrainOptions& options) {
  config.validate();
  arch.validate();
  if (partition.num_vehicles() == 0) throw InputError("partition has no vehicles");
  for (const auto& vp : partition.vehicles) {
    for (const PartitionEntry& e : vp.entries) {
      if (e.sample_id >= dataset.samples.size()) throw InputError("partition references a sample outside the dataset");
    }
  }

  std::vector<VehicleState> vehicles = make_vehicles(partition, protocol);
  const std::size_t vcount = vehicles.size();

  Views views;
  views.val.resize(vcount);
  for (std::size_t v = 0; v < vcount; ++v) {
    for (const PartitionEntry& e : vehicles[v].val) {
      const LocalItem it{&dataset.samples[e.sample_id], e.mask, nullptr};
      views.val[v].push_back(it);
      views.pooled_val.push_back(it);
    }
  }
  for (const auto& vp : partition.vehicles) {
    for (const PartitionEntry& e : vp.entries) {
      if (e.role != SplitRole::kTest) continue;
      views.test.push_back({&dataset.samples[e.sample_id], ModalityMask::all(), nullptr});
      views.test_samples.push_back(&dataset.samples[e.sample_id]);
    }
  }

  TrainingState state;
  if (options.resume != nullptr) {
    state = *options.resume;
    if (!(state.global.arch() == arch)) throw ConfigError("resume state was produced with a different architecture");
    if (state.synthetic.size() == vcount) {
      for (std::size_t v = 0; v < vcount; ++v) vehicles[v].synthetic = state.synthetic[v];
    }
    if (state.fills.size() == vcount) {
      for (std::size_t v = 0; v < vcount; ++v) {
        if (state.fills[v].size() == vehicles[v].train.size()) vehicles[v].fills = state.fills[v];
      }
    }
  } else {
    state.global = MultiModalNet::build(arch);
  }
  if (protocol == Protocol::kFlash && state.local_models.size() != vcount) {
    state.local_models.assign(vcount, state.global);
  }

  const bool may_generate = protocol == Protocol::kGfl4bs && config.max_generations > 0 &&
                            (config.generate_labels || config.fill_modalities);
  MultiModalNet eval_storage;
  const MultiModalNet* eval_model = options.eval_model;
  if (may_generate && eval_model == nullptr) {
    RoundConfig ec = config;
    if (config.eval_rounds > 0) ec.rounds = config.eval_rounds;
    eval_storage = run_training(dataset, partition, Protocol::kFedAvg, arch, ec).model;
    eval_model = &eval_storage;
  }

  GenBounds fallback_bounds;
  if (may_generate) {
    std::vector<const Sample*> all;
    for (const auto& v : vehicles) {
      for (const auto& e : v.train) all.push_back(&dataset.samples[e.sample_id]);
    }
    fallback_bounds = bounds_from_samples(all);
  }

  TrainResult result;
  TrainReport& report = result.report;
  report.protocol = protocol;

  auto snapshot = [&]() {
    state.synthetic.assign(vcount, {});
    state.fills.assign(vcount, {});
    for (std::size_t v = 0; v < vcount; ++v) {
      state.synthetic[v] = vehicles[v].synthetic;
      state.fills[v] = vehicles[v].fills;
    }
  };

  std::vector<LocalItem> cl_items;
  if (protocol == Protocol::kCl) {
    for (const auto& v : vehicles) {
      for (const auto& e : v.train) cl_items.push_back({&dataset.samples[e.sample_id], e.mask, nullptr});
    }
  }

  try {
    for (std::size_t round = state.completed_rounds + 1; round <= config.rounds; ++round) {
      RoundMetrics row;
      row.round = round;
      row.delta_loss = kNaN;
      const std::size_t ledger_before = state.ledger.entries.size();

      if (protocol != Protocol::kCl) {
        state.loss_history.push_back(mean_val_loss(state.global, views));
        if (const auto d = loss_decline(state.loss_history)) row.delta_loss = *d;
      }

      if (may_generate && state.generations < config.max_generations &&
          generation_trigger(state.loss_history, config.gamma, config.direction)) {
        row.triggered = true;
        ++state.generations;
        for_each_vehicle(vcount, config.parallel, [&](std::size_t v) {
          generate_for_vehicle(vehicles[v], dataset, state.global, *eval_model, config, round, fallback_bounds);
        });
      }

      if (protocol == Protocol::kCl) {
        local_update(state.global, cl_items, all_branches(), config.local_epochs, config.batch_size,
                     config.learning_rate, derive_seed(config.seed, round, vcount));
        if (round == 1) {
          for (const auto& v : vehicles) {
            std::vector<LocalItem> own;
            for (const auto& e : v.train) own.push_back({&dataset.samples[e.sample_id], e.mask, nullptr});
            state.ledger.add(round, v.id, 0, raw_upload_volume(arch, own));
          }
        }
      } else {
        std::vector<Upload> uploads(vcount);
        std::vector<std::size_t> down(vcount, 0), up(vcount, 0);
        for_each_vehicle(vcount, config.parallel, [&](std::size_t v) {
          VehicleState& vs = vehicles[v];
          MultiModalNet* local = nullptr;
          MultiModalNet fresh;
          if (protocol == Protocol::kFlash) {
            local = &state.local_models[v];
            if (round == 1 || !state.flash_selected) {
              *local = state.global;
              down[v] = local->state_count();
            } else {
              const BranchId sel = branch_of(*state.flash_selected);
              local->branch(sel) = state.global.branch(sel);
              local->branch(BranchId::kIntegration) = state.global.branch(BranchId::kIntegration);
              down[v] = local->branch(sel).state_count() + local->branch(BranchId::kIntegration).state_count();
            }
          } else {
            fresh = state.global;
            local = &fresh;
            down[v] = held_volume(fresh, vs.holds);
          }
          const std::vector<LocalItem> items = train_items(dataset, vs);
          local_update(*local, items, vs.holds, config.local_epochs, config.batch_size, config.learning_rate,
                       derive_seed(config.seed, round, v));
          Upload& u = uploads[v];
          u.vehicle = v;
          for (BranchId b : kAllBranches) {
            if (vs.holds_branch(b)) u.branches.push_back({b, local->branch(b)});
          }
          up[v] = held_volume(*local, vs.holds);
        });
        for (std::size_t v = 0; v < vcount; ++v) state.ledger.add(round, v, down[v], up[v]);
        state.global = aggregate(state.global, uploads);
        if (protocol == Protocol::kFlash) {
          state.flash_selected = flash_select(state.global, views.pooled_val);
          report.flash_selected.push_back(*state.flash_selected);
        }
      }

      for (std::size_t i = ledger_before; i < state.ledger.entries.size(); ++i) {
        row.params_down += state.ledger.entries[i].params_down;
        row.params_up += state.ledger.entries[i].params_up;
      }
      row.global_acc = evaluate(state.global, views.test).accuracy;
      const std::vector<double> local = local_accuracies(state.global, views);
      row.mean_local_acc =
          local.empty() ? kNaN : std::accumulate(local.begin(), local.end(), 0.0) / static_cast<double>(local.size());
      row.local_var = population_variance(local);
      state.rounds.push_back(row);
      state.completed_rounds = round;

      if (options.on_round) {
        snapshot();
        options.on_round(state);
      }
      if (options.stop_after && round >= *options.stop_after) break;
    }
  } catch (const DivergenceError& e) {
    report.diverged = true;
    report.divergence = e.what();
  }

  report.rounds = state.rounds;
  report.loss_history = state.loss_history;
  report.generations = state.generations;
  report.local_acc = local_accuracies(state.global, views);
  report.global_acc = state.rounds.empty() ? evaluate(state.global, views.test).accuracy : state.rounds.back().global_acc;
  report.local_var = population_variance(report.local_acc);
  report.sum_rate_ratio = kNaN;
  const bool have_channels =
      !views.test_samples.empty() && dataset.manifest.num_antennas > 0 &&
      std::all_of(views.test_samples.begin(), views.test_samples.end(), [](const Sample* s) { return !s->channel.empty(); });
  if (have_channels) {
    const Codebook cb = make_dft_codebook(dataset.manifest.num_antennas, dataset.manifest.num_beams);
    report.sum_rate_ratio = sum_rate_ratio(state.global, views.test_samples, cb, dataset.manifest.tx_power,
                                           dataset.manifest.noise_power, config.users_per_group);
  }
  result.ledger = state.ledger;
  result.model = state.global;
  return result;
}

TrainResult run_benchmark_fedavg(const Dataset& dataset, const Partition& partition, const ArchConfig& arch,
                                 const RoundConfig& config) {
  return run_training(dataset, partition, Protocol::kFedAvg, arch, config);
}

TrainResult run_benchmark_flash(const Dataset& dataset, const Partition& partition, const ArchConfig& arch,
                                const RoundConfig& config) {
  return run_training(dataset, partition, Protocol::kFlash, arch, config);
}

TrainResult run_benchmark_cl(const Dataset& dataset, const Partition& partition, const ArchConfig& arch,
                             const RoundConfig& config) {
  return run_training(dataset, partition, Protocol::kCl, arch, config);
}

}  // namespace beamfl
