#include "beamfl/dataset_io.hpp"

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "beamfl/error.hpp"

namespace beamfl {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kFormat = "beamfl-dataset";

json manifest_to_json(const DatasetManifest& m) {
  return {{"format", kFormat},
          {"version", 1},
          {"num_vehicles", m.num_vehicles},
          {"num_beams", m.num_beams},
          {"num_antennas", m.num_antennas},
          {"gps_dim", m.gps_dim},
          {"rgb_dims", m.rgb_dims},
          {"lidar_dims", m.lidar_dims},
          {"samples_per_vehicle", m.samples_per_vehicle},
          {"seed", m.seed},
          {"noise_power", m.noise_power},
          {"tx_power", m.tx_power}};
}

DatasetManifest manifest_from_json(const json& j) {
  if (j.value("format", std::string()) != kFormat) throw LoadError("manifest is not a beamfl dataset");
  if (j.value("version", 0) != 1) throw LoadError("unsupported dataset version");
  DatasetManifest m;
  m.num_vehicles = j.at("num_vehicles").get<std::size_t>();
  m.num_beams = j.at("num_beams").get<std::size_t>();
  m.num_antennas = j.value("num_antennas", std::size_t{0});
  m.gps_dim = j.value("gps_dim", std::size_t{2});
  m.rgb_dims = j.at("rgb_dims").get<std::array<std::size_t, 2>>();
  m.lidar_dims = j.at("lidar_dims").get<std::array<std::size_t, 3>>();
  m.samples_per_vehicle = j.at("samples_per_vehicle").get<std::vector<std::size_t>>();
  m.seed = j.value("seed", std::uint64_t{0});
  m.noise_power = j.value("noise_power", 1e-4);
  m.tx_power = j.value("tx_power", 1.0);
  if (m.num_beams < 2) throw LoadError("manifest codebook size must be at least 2");
  if (m.samples_per_vehicle.size() != m.num_vehicles) {
    throw LoadError("manifest samples_per_vehicle does not list every vehicle");
  }
  return m;
}

json sample_to_json(const Sample& s) {
  std::vector<int> lidar(s.lidar.size());
  for (std::size_t i = 0; i < lidar.size(); ++i) lidar[i] = static_cast<int>(s.lidar[i]);
  json j = {{"id", s.id},
            {"vehicle", s.vehicle},
            {"label", s.label + 1},
            {"mask", s.mask.str()},
            {"synthetic", s.synthetic},
            {"los", s.line_of_sight},
            {"gps", s.gps},
            {"rgb", s.rgb},
            {"lidar", lidar}};
  if (!s.channel.empty()) {
    std::vector<double> ch;
    ch.reserve(2 * s.channel.size());
    for (const cplx& c : s.channel) {
      ch.push_back(c.real());
      ch.push_back(c.imag());
    }
    j["channel"] = std::move(ch);
  }
  return j;
}

[[noreturn]] void fail(std::size_t row, const std::string& what) {
  throw LoadError("sample row " + std::to_string(row) + ": " + what);
}

Sample sample_from_json(const json& j, const DatasetManifest& m, std::size_t row) {
  Sample s;
  try {
    s.id = j.at("id").get<std::size_t>();
    s.vehicle = j.at("vehicle").get<std::size_t>();
    const long long label = j.at("label").get<long long>();
    if (label < 1 || static_cast<std::size_t>(label) > m.num_beams) {
      fail(row, "label " + std::to_string(label) + " outside [1, " + std::to_string(m.num_beams) + "]");
    }
    s.label = static_cast<std::size_t>(label - 1);
    s.mask = ModalityMask::parse(j.value("mask", std::string("GRL")));
    s.synthetic = j.value("synthetic", false);
    s.line_of_sight = j.value("los", true);
    s.gps = j.at("gps").get<std::vector<double>>();
    s.rgb = j.at("rgb").get<std::vector<double>>();
    s.lidar = j.at("lidar").get<std::vector<double>>();
    if (j.contains("channel")) {
      const auto ch = j.at("channel").get<std::vector<double>>();
      if (ch.size() % 2 != 0) fail(row, "channel must hold (re, im) pairs");
      for (std::size_t i = 0; i < ch.size(); i += 2) s.channel.emplace_back(ch[i], ch[i + 1]);
    }
  } catch (const json::exception& e) {
    fail(row, e.what());
  } catch (const InputError& e) {
    fail(row, e.what());
  }
  if (s.id != row) fail(row, "id " + std::to_string(s.id) + " out of order");
  if (s.vehicle >= m.num_vehicles) fail(row, "vehicle index out of range");
  if (s.gps.size() != m.gps_dim) fail(row, "gps has " + std::to_string(s.gps.size()) + " values");
  if (s.rgb.size() != m.rgb_dims[0] * m.rgb_dims[1]) fail(row, "rgb dimension mismatch");
  if (s.lidar.size() != m.lidar_dims[0] * m.lidar_dims[1] * m.lidar_dims[2]) {
    fail(row, "lidar dimension mismatch");
  }
  if (!lidar_is_valid(s.lidar)) {
    fail(row, "lidar must use values {0,1,-1,-2} with exactly one -1 and one -2");
  }
  if (!s.channel.empty() && m.num_antennas != 0 && s.channel.size() != m.num_antennas) {
    fail(row, "channel length does not match num_antennas");
  }
  return s;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& dataset) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir + ": " + ec.message());
  {
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!out) throw InputError("cannot write manifest in " + dir);
    out << manifest_to_json(dataset.manifest).dump(2) << '\n';
  }
  std::ofstream out(fs::path(dir) / "samples.jsonl", std::ios::trunc);
  if (!out) throw InputError("cannot write samples in " + dir);
  for (const Sample& s : dataset.samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw InputError("short write in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw LoadError("missing manifest.json in " + dir);
    try {
      ds.manifest = manifest_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw LoadError(std::string("malformed manifest: ") + e.what());
    }
  }
  std::ifstream in(fs::path(dir) / "samples.jsonl");
  if (!in) throw LoadError("missing samples.jsonl in " + dir);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(row, e.what());
    }
    ds.samples.push_back(sample_from_json(j, ds.manifest, row));
    ++row;
  }
  std::vector<std::size_t> counts(ds.manifest.num_vehicles, 0);
  for (const Sample& s : ds.samples) ++counts[s.vehicle];
  if (counts != ds.manifest.samples_per_vehicle) {
    throw LoadError("per-vehicle sample counts do not match the manifest");
  }
  return ds;
}

}  // namespace beamfl
