#include "beamfl/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace beamfl {
namespace detail {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path);
}

}  // namespace detail

namespace {
constexpr std::string_view kMagic = "BFLMODEL";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_model(const MultiModalNet& net) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.str(nlohmann::json(net.arch()).dump());
  for (BranchId b : kAllBranches) {
    net.branch(b).for_each_state([&](std::span<const double> s) { w.f64s(s); });
  }
  return std::move(w.bytes());
}

MultiModalNet deserialize_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect(kMagic);
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  ArchConfig arch;
  try {
    arch = nlohmann::json::parse(r.str()).get<ArchConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint architecture is not valid JSON: ") + e.what());
  }
  MultiModalNet net = MultiModalNet::build(arch);
  for (BranchId b : kAllBranches) {
    net.branch(b).for_each_state([&](std::span<double> s) { r.f64s_into(s); });
  }
  if (!r.done()) throw LoadError("trailing bytes after checkpoint");
  return net;
}

void save_checkpoint(const std::string& path, const MultiModalNet& net) {
  detail::write_file_bytes(path, serialize_model(net));
}

MultiModalNet load_checkpoint(const std::string& path) {
  return deserialize_model(detail::read_file_bytes(path));
}

std::uint64_t model_fingerprint(const MultiModalNet& net) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t byte : serialize_model(net)) {
    h ^= byte;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace beamfl
