#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "beamfl/checkpoint.hpp"
#include "beamfl/dataset_io.hpp"
#include "beamfl/error.hpp"
#include "beamfl/imbalance.hpp"
#include "beamfl/run_state.hpp"

namespace fs = std::filesystem;

namespace beamfl::cli {

namespace {

std::mutex print_mutex;

__attribute__((format(printf, 1, 2))) void say(const char* fmt, ...) {
  std::lock_guard<std::mutex> lock(print_mutex);
  va_list args;
  va_start(args, fmt);
  std::vprintf(fmt, args);
  va_end(args);
  std::fflush(stdout);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
  if (!out) throw ConfigError("short write to " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string pick_out(const std::string& flag, const ExperimentConfig& c, const std::string& leaf) {
  if (!flag.empty()) return flag;
  if (!c.out.empty()) return c.out;
  return default_out(leaf);
}

Dataset obtain_dataset(const std::string& dir, const ExperimentConfig& c, std::uint64_t seed) {
  if (!dir.empty()) return load_dataset(dir);
  return generate_scenario(c.scenario, seed).dataset;
}

void check_dataset_fits(const Dataset& ds, const ExperimentConfig& c) {
  if (ds.manifest.num_beams != c.arch.num_beams) {
    throw ConfigError("dataset has " + std::to_string(ds.manifest.num_beams) + " beams but the config expects " +
                      std::to_string(c.arch.num_beams));
  }
}

std::string removed_text(const std::vector<std::size_t>& labels) {
  std::string s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(labels[i] + 1);
  }
  return s;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single run.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct CellSummary {
  Protocol protocol = Protocol::kGfl4bs;
  std::uint64_t seed = 0;
  double acc = 0, com = 0, var = 0;
  std::size_t generations = 0;
  std::size_t comm_up = 0, comm_down = 0;
  std::size_t full_params = 0;
  double upload_fraction = 0;
  bool diverged = false;
};

nlohmann::json summary_json(const CellSummary& s, const TrainReport& r) {
  return {{"protocol", protocol_name(s.protocol)},
          {"seed", s.seed},
          {"acc", s.acc},
          {"com", std::isfinite(s.com) ? nlohmann::json(s.com) : nlohmann::json(nullptr)},
          {"var", s.var},
          {"generations", s.generations},
          {"comm_up", s.comm_up},
          {"comm_down", s.comm_down},
          {"comm_total", s.comm_up + s.comm_down},
          {"full_params", s.full_params},
          {"upload_fraction", s.upload_fraction},
          {"rounds", r.rounds.size()},
          {"local_acc", r.local_acc},
          {"diverged", r.diverged},
          {"divergence", r.divergence}};
}

CellSummary summary_from_json(const nlohmann::json& j) {
  CellSummary s;
  s.protocol = parse_protocol(j.at("protocol").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.acc = j.at("acc").get<double>();
  s.com = j.at("com").is_null() ? std::nan("") : j.at("com").get<double>();
  s.var = j.at("var").get<double>();
  s.generations = j.at("generations").get<std::size_t>();
  s.comm_up = j.at("comm_up").get<std::size_t>();
  s.comm_down = j.at("comm_down").get<std::size_t>();
  s.full_params = j.at("full_params").get<std::size_t>();
  s.upload_fraction = j.at("upload_fraction").get<double>();
  s.diverged = j.at("diverged").get<bool>();
  return s;
}

std::size_t full_state(const ArchConfig& arch) {
  std::size_t n = 0;
  for (BranchId b : kAllBranches) n += expected_counts(arch, b).state;
  return n;
}

struct SeedJob {
  const TrainOptionsCli* opts = nullptr;
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::vector<Protocol> protocols;
  std::string out;
};

CellSummary run_cell(const SeedJob& job, const Dataset& ds, const Partition& p, Protocol proto,
                     const MultiModalNet* eval_model, MultiModalNet* model_out) {
  const std::string dir = job.out + "/" + protocol_name(proto);
  ensure_dir(dir);
  const std::string summary_path = dir + "/summary.json";
  const std::string state_path = dir + "/state.bin";

  if (job.opts->resume && fs::exists(summary_path)) {
    say("seed %llu %-7s already complete, skipping\n", static_cast<unsigned long long>(job.seed),
        protocol_name(proto));
    if (model_out) *model_out = load_checkpoint(dir + "/model.bfl");
    return summary_from_json(nlohmann::json::parse(read_text(summary_path)));
  }

  ArchConfig arch = job.config.arch;
  arch.seed = job.seed;
  RoundConfig rc = job.config.training;
  rc.seed = job.seed;
  rc.parallel = !job.opts->sequential;

  TrainOptions topts;
  topts.eval_model = eval_model;
  TrainingState resume_state;
  if (job.opts->resume && fs::exists(state_path)) {
    resume_state = load_training_state(state_path);
    topts.resume = &resume_state;
    say("seed %llu %-7s resuming after round %zu\n", static_cast<unsigned long long>(job.seed),
        protocol_name(proto), resume_state.completed_rounds);
  }
  topts.on_round = [&](const TrainingState& s) {
    save_training_state(state_path + ".tmp", s);
    fs::rename(state_path + ".tmp", state_path);
  };

  const TrainResult r = run_training(ds, p, proto, arch, rc, topts);

  std::ostringstream metrics, ledger;
  write_metrics_csv(metrics, r.report.rounds);
  r.ledger.write_csv(ledger);
  write_text(dir + "/metrics.csv", metrics.str());
  write_text(dir + "/ledger.csv", ledger.str());
  save_checkpoint(dir + "/model.bfl", r.model);

  CellSummary s;
  s.protocol = proto;
  s.seed = job.seed;
  s.acc = r.report.global_acc;
  s.com = r.report.sum_rate_ratio;
  s.var = r.report.local_var;
  s.generations = r.report.generations;
  s.comm_up = r.ledger.total_up();
  s.comm_down = r.ledger.total_down();
  s.full_params = full_state(arch);
  s.diverged = r.report.diverged;
  if (!r.ledger.entries.empty() && proto != Protocol::kCl) {
    s.upload_fraction = static_cast<double>(s.comm_up) /
                        (static_cast<double>(r.ledger.entries.size()) * static_cast<double>(s.full_params));
  }
  write_text(summary_path, summary_json(s, r.report).dump(2) + "\n");
  if (model_out) *model_out = r.model;
  say("seed %llu %-7s Com %.4f  Acc %.4f  Var %.5f  generations %zu%s\n",
      static_cast<unsigned long long>(job.seed), protocol_name(proto), s.com, s.acc, s.var, s.generations,
      s.diverged ? "  DIVERGED" : "");
  if (s.diverged) say("  %s\n", r.report.divergence.c_str());
  return s;
}

std::vector<CellSummary> run_seed(const SeedJob& job) {
  ensure_dir(job.out);
  const Dataset ds = obtain_dataset(job.opts->dataset, job.config, job.seed);
  check_dataset_fits(ds, job.config);
  const Partition p = build_partition(ds, job.config.partition, job.seed);
  write_text(job.out + "/partition.json", nlohmann::json(p).dump() + "\n");

  // FedAvg first: its final model doubles as the soft-label teacher.
  std::vector<Protocol> order = job.protocols;
  std::stable_partition(order.begin(), order.end(), [](Protocol x) { return x == Protocol::kFedAvg; });
  const RoundConfig& rc = job.config.training;
  const bool reuse = rc.eval_rounds == 0 || rc.eval_rounds == rc.rounds;

  std::vector<CellSummary> out;
  MultiModalNet fedavg_model;
  bool have_fedavg = false;
  for (Protocol proto : order) {
    const bool is_fedavg = proto == Protocol::kFedAvg;
    const MultiModalNet* eval = have_fedavg && reuse ? &fedavg_model : nullptr;
    out.push_back(run_cell(job, ds, p, proto, eval, is_fedavg ? &fedavg_model : nullptr));
    have_fedavg = have_fedavg || is_fedavg;
  }
  return out;
}

void print_table(const std::vector<CellSummary>& cells, const std::vector<Protocol>& protocols) {
  say("\n%-8s %6s %8s %8s %9s\n", "protocol", "seeds", "Com", "Acc", "Var");
  for (Protocol p : protocols) {
    std::vector<double> com, acc, var;
    for (const auto& c : cells) {
      if (c.protocol != p) continue;
      com.push_back(c.com);
      acc.push_back(c.acc);
      var.push_back(c.var);
    }
    say("%-8s %6zu %8.4f %8.4f %9.5f\n", protocol_name(p), acc.size(), mean_of(com), mean_of(acc), mean_of(var));
  }
}

}  // namespace

std::string default_out(const std::string& leaf) {
  const char* root = std::getenv("BEAMFL_OUT");
  return (fs::path(root && *root ? root : "runs") / leaf).string();
}

int cmd_gen(const GenOptions& o) {
  ExperimentConfig c = o.config;
  c.finalize();
  const std::uint64_t seed = o.seed.value_or(c.seeds.front());
  const std::string out = pick_out(o.out, c, "dataset");
  ensure_dir(out);
  const Scenario s = generate_scenario(c.scenario, seed);
  save_dataset(out, s.dataset);
  write_text(out + "/scenario.json", nlohmann::json(c.scenario).dump(2) + "\n");
  const Partition base = base_partition(s.dataset);
  const auto hs = vehicle_histograms(base, s.dataset);
  say("vehicles %zu  beams %zu  samples %zu  zeta %.4f  epsilon %.4f\n", s.dataset.manifest.num_vehicles,
      s.dataset.manifest.num_beams, s.dataset.samples.size(), average_overlap_rate(hs),
      normalized_entropy(global_histogram(hs)));
  say("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_partition(const PartitionOptions& o) {
  ExperimentConfig c = o.config;
  c.finalize();
  const std::uint64_t seed = o.seed.value_or(c.seeds.front());
  const std::string out = pick_out(o.out, c, "partition");
  ensure_dir(out);
  const Dataset ds = obtain_dataset(o.dataset, c, seed);
  const Partition base = base_partition(ds);
  const Partition p = build_partition(ds, c.partition, seed);
  write_text(out + "/partition.json", nlohmann::json(p).dump() + "\n");

  const auto h0 = vehicle_histograms(base, ds), h1 = vehicle_histograms(p, ds);
  const ModalityCensus census = modality_census(p, {SplitRole::kTrain, SplitRole::kVal});
  std::ostringstream csv;
  csv << "vehicle,samples,train,val,test,kappa_gps,kappa_rgb,kappa_lidar,removed_labels\n";
  for (std::size_t v = 0; v < p.num_vehicles(); ++v) {
    std::size_t counts[4] = {0, 0, 0, 0};
    for (const auto& e : p.vehicles[v].entries) ++counts[static_cast<std::size_t>(e.role)];
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%zu,%.6f,%.6f,%.6f,", v, p.vehicles[v].entries.size(),
                  counts[1], counts[2], counts[3], modality_completeness(census, v, Modality::kGps),
                  modality_completeness(census, v, Modality::kRgb), modality_completeness(census, v, Modality::kLidar));
    csv << line << removed_text(p.vehicles[v].removed_labels) << "\n";
  }
  write_text(out + "/imbalance.csv", csv.str());

  say("samples %zu (base %zu)\n", p.total_entries(), base.total_entries());
  say("zeta %.4f (base %.4f)  epsilon %.4f\n", average_overlap_rate(h1), average_overlap_rate(h0),
      normalized_entropy(global_histogram(h1)));
  say("%-8s %8s %8s %8s %8s\n", "vehicle", "samples", "k_gps", "k_rgb", "k_lidar");
  for (std::size_t v = 0; v < p.num_vehicles(); ++v) {
    say("%-8zu %8zu %8.3f %8.3f %8.3f\n", v, p.vehicles[v].entries.size(),
        modality_completeness(census, v, Modality::kGps), modality_completeness(census, v, Modality::kRgb),
        modality_completeness(census, v, Modality::kLidar));
  }
  say("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_train(const TrainOptionsCli& o) {
  ExperimentConfig c = o.config;
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (!o.protocols.empty()) c.protocols = o.protocols;
  c.finalize();
  const std::string out = pick_out(o.out, c, "train");
  ensure_dir(out);
  write_text(out + "/experiment.json", experiment_to_json(c).dump(2) + "\n");

  std::vector<SeedJob> jobs;
  for (std::uint64_t seed : c.seeds) {
    jobs.push_back(SeedJob{&o, c, seed, c.protocols, out + "/seed_" + std::to_string(seed)});
  }
  std::vector<CellSummary> cells;
  if (o.sequential) {
    for (const auto& j : jobs) {
      auto r = run_seed(j);
      cells.insert(cells.end(), r.begin(), r.end());
    }
  } else {
    std::vector<std::future<std::vector<CellSummary>>> futures;
    for (const auto& j : jobs) futures.push_back(std::async(std::launch::async, run_seed, std::cref(j)));
    for (auto& f : futures) {
      auto r = f.get();
      cells.insert(cells.end(), r.begin(), r.end());
    }
  }

  std::sort(cells.begin(), cells.end(), [&](const CellSummary& a, const CellSummary& b) {
    if (a.seed != b.seed) return a.seed < b.seed;
    const auto ia = std::find(c.protocols.begin(), c.protocols.end(), a.protocol);
    const auto ib = std::find(c.protocols.begin(), c.protocols.end(), b.protocol);
    return ia < ib;
  });
  std::ostringstream csv;
  csv << "protocol,seed,Com,Acc,Var,generations,comm_total\n";
  bool diverged = false;
  for (const auto& s : cells) {
    char line[256];
    std::snprintf(line, sizeof line, "%s,%llu,%.17g,%.17g,%.17g,%zu,%zu\n", protocol_name(s.protocol),
                  static_cast<unsigned long long>(s.seed), s.com, s.acc, s.var, s.generations,
                  s.comm_up + s.comm_down);
    csv << line;
    diverged = diverged || s.diverged;
  }
  write_text(out + "/summary.csv", csv.str());
  print_table(cells, c.protocols);
  say("wrote %s\n", out.c_str());
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_report(const ReportOptions& o) {
  std::vector<CellSummary> cells;
  std::vector<std::string> series_rows;
  for (const std::string& run : o.runs) {
    if (!fs::is_directory(run)) throw ConfigError("run directory " + run + " does not exist");
    std::vector<fs::path> found;
    for (const auto& entry : fs::recursive_directory_iterator(run)) {
      if (entry.is_regular_file() && entry.path().filename() == "summary.json") found.push_back(entry.path());
    }
    if (found.empty()) throw ConfigError("no finished runs under " + run);
    std::sort(found.begin(), found.end());
    for (const fs::path& path : found) {
      const CellSummary s = summary_from_json(nlohmann::json::parse(read_text(path.string())));
      cells.push_back(s);
      const fs::path metrics = path.parent_path() / "metrics.csv";
      if (!fs::exists(metrics)) continue;
      std::ifstream in(metrics);
      for (const RoundMetrics& m : read_metrics_csv(in)) {
        char line[320];
        std::snprintf(line, sizeof line, "%s,%llu,%zu,%.17g,%.17g,%.17g,%.17g,%d,%zu,%zu\n",
                      protocol_name(s.protocol), static_cast<unsigned long long>(s.seed), m.round, m.global_acc,
                      m.mean_local_acc, m.local_var, m.delta_loss, m.triggered ? 1 : 0, m.params_up, m.params_down);
        series_rows.push_back(line);
      }
    }
  }

  std::vector<Protocol> present;
  for (Protocol p : kAllProtocols) {
    if (std::any_of(cells.begin(), cells.end(), [p](const CellSummary& c) { return c.protocol == p; })) {
      present.push_back(p);
    }
  }
  auto comm_mean = [&](Protocol p) {
    std::vector<double> v;
    for (const auto& c : cells) {
      if (c.protocol == p) v.push_back(static_cast<double>(c.comm_up + c.comm_down));
    }
    return mean_of(v);
  };
  const bool have_flash = std::find(present.begin(), present.end(), Protocol::kFlash) != present.end();

  std::ostringstream csv;
  csv << "protocol,runs,acc_mean,acc_std,com_mean,com_std,var_mean,var_std,comm_total,overhead_ratio,"
         "upload_fraction\n";
  say("%-8s %5s %8s %8s %8s %9s %9s %9s\n", "protocol", "runs", "Acc", "+-", "Com", "Var", "overhead", "upload");
  for (Protocol p : present) {
    std::vector<double> acc, com, var, frac;
    for (const auto& c : cells) {
      if (c.protocol != p) continue;
      acc.push_back(c.acc);
      com.push_back(c.com);
      var.push_back(c.var);
      frac.push_back(c.upload_fraction);
    }
    const double comm = comm_mean(p);
    const double ref = have_flash ? comm_mean(Protocol::kFlash) : comm;
    const double ratio = ref > 0 ? comm / ref : std::nan("");
    char line[400];
    std::snprintf(line, sizeof line, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  protocol_name(p), acc.size(), mean_of(acc), std_of(acc), mean_of(com), std_of(com), mean_of(var),
                  std_of(var), comm, ratio, mean_of(frac));
    csv << line;
    say("%-8s %5zu %8.4f %8.4f %8.4f %9.5f %9.4f %9.4f\n", protocol_name(p), acc.size(), mean_of(acc), std_of(acc),
        mean_of(com), mean_of(var), ratio, mean_of(frac));
  }
  if (!have_flash) say("no flash run found; overhead ratios are relative to each protocol itself\n");

  const std::string out = o.out.empty() ? o.runs.front() : o.out;
  ensure_dir(out);
  write_text(out + "/report.csv", csv.str());
  std::string series = "protocol,seed,round,global_acc,mean_local_acc,local_var,dL,triggered,params_up,params_down\n";
  for (const auto& row : series_rows) series += row;
  write_text(out + "/series.csv", series);
  say("wrote %s/report.csv and %s/series.csv\n", out.c_str(), out.c_str());
  return kExitOk;
}

}  // namespace beamfl::cli
