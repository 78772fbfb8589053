#include "beamfl/run_state.hpp"

#include <cstdint>
#include <limits>

#include "beamfl/checkpoint.hpp"
#include "beamfl/error.hpp"
#include "binary_io.hpp"

namespace beamfl {
namespace {

using detail::ByteReader;
using detail::ByteWriter;
using detail::read_file_bytes;
using detail::write_file_bytes;

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

void put_model(ByteWriter& w, const MultiModalNet& net) {
  const auto bytes = serialize_model(net);
  w.str(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

MultiModalNet get_model(ByteReader& r) {
  const std::string s = r.str();
  return deserialize_model(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void put_sample(ByteWriter& w, const Sample& s) {
  w.u64(s.id);
  w.u64(s.vehicle);
  w.u64(s.label);
  w.u8(s.mask.bits());
  w.u8(s.synthetic ? 1 : 0);
  w.u8(s.line_of_sight ? 1 : 0);
  w.f64s(s.gps);
  w.f64s(s.rgb);
  w.f64s(s.lidar);
}

Sample get_sample(ByteReader& r) {
  Sample s;
  s.id = r.u64();
  s.vehicle = r.u64();
  s.label = r.u64();
  const std::uint8_t bits = r.u8();
  s.mask = ModalityMask::none();
  for (Modality q : kAllModalities) s.mask.set(q, (bits >> index_of(q)) & 1u);
  s.synthetic = r.u8() != 0;
  s.line_of_sight = r.u8() != 0;
  s.gps = r.f64s();
  s.rgb = r.f64s();
  s.lidar = r.f64s();
  return s;
}

}  // namespace

void save_training_state(const std::string& path, const TrainingState& state) {
  ByteWriter w;
  w.raw("BFLSTATE");
  w.u32(kVersion);
  w.u64(state.completed_rounds);
  w.u64(state.generations);
  w.u32(state.flash_selected ? static_cast<std::uint32_t>(index_of(*state.flash_selected)) : kNone);
  w.f64s(state.loss_history);

  w.u64(state.rounds.size());
  for (const RoundMetrics& m : state.rounds) {
    w.u64(m.round);
    w.f64(m.global_acc);
    w.f64(m.mean_local_acc);
    w.f64(m.local_var);
    w.f64(m.delta_loss);
    w.u8(m.triggered ? 1 : 0);
    w.u64(m.params_up);
    w.u64(m.params_down);
  }
  w.u64(state.ledger.entries.size());
  for (const TransferRecord& e : state.ledger.entries) {
    w.u64(e.round);
    w.u64(e.vehicle);
    w.u64(e.params_down);
    w.u64(e.params_up);
  }

  put_model(w, state.global);
  w.u64(state.local_models.size());
  for (const MultiModalNet& m : state.local_models) put_model(w, m);

  w.u64(state.synthetic.size());
  for (const auto& samples : state.synthetic) {
    w.u64(samples.size());
    for (const Sample& s : samples) put_sample(w, s);
  }
  w.u64(state.fills.size());
  for (const auto& fills : state.fills) {
    w.u64(fills.size());
    for (const FillFeatures& f : fills) {
      for (const auto& v : f) w.f64s(v);
    }
  }
  write_file_bytes(path, w.bytes());
}

TrainingState load_training_state(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  ByteReader r(bytes);
  r.expect("BFLSTATE");
  if (r.u32() != kVersion) throw LoadError("unsupported training state version");
  TrainingState s;
  s.completed_rounds = r.u64();
  s.generations = r.u64();
  const std::uint32_t sel = r.u32();
  if (sel != kNone) {
    if (sel >= kNumModalities) throw LoadError("training state names an unknown modality");
    s.flash_selected = static_cast<Modality>(sel);
  }
  s.loss_history = r.f64s();

  const std::uint64_t nrounds = r.u64();
  for (std::uint64_t i = 0; i < nrounds; ++i) {
    RoundMetrics m;
    m.round = r.u64();
    m.global_acc = r.f64();
    m.mean_local_acc = r.f64();
    m.local_var = r.f64();
    m.delta_loss = r.f64();
    m.triggered = r.u8() != 0;
    m.params_up = r.u64();
    m.params_down = r.u64();
    s.rounds.push_back(m);
  }
  const std::uint64_t nledger = r.u64();
  for (std::uint64_t i = 0; i < nledger; ++i) {
    TransferRecord e;
    e.round = r.u64();
    e.vehicle = r.u64();
    e.params_down = r.u64();
    e.params_up = r.u64();
    s.ledger.entries.push_back(e);
  }

  s.global = get_model(r);
  const std::uint64_t nlocal = r.u64();
  for (std::uint64_t i = 0; i < nlocal; ++i) s.local_models.push_back(get_model(r));

  const std::uint64_t nsynth = r.u64();
  s.synthetic.resize(nsynth);
  for (auto& samples : s.synthetic) {
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) samples.push_back(get_sample(r));
  }
  const std::uint64_t nfill = r.u64();
  s.fills.resize(nfill);
  for (auto& fills : s.fills) {
    fills.resize(r.u64());
    for (FillFeatures& f : fills) {
      for (auto& v : f) v = r.f64s();
    }
  }
  if (!r.done()) throw LoadError("trailing bytes in training state");
  return s;
}

}  // namespace beamfl
