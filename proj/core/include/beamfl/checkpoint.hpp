#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "beamfl/beam_model.hpp"

namespace beamfl {

/// Checkpoint layout (all integers and doubles little-endian):
///   "BFLMODEL" | u32 version (=1) | u64 len + JSON ArchConfig |
///   for branch in (gps, rgb, lidar, integration):
///     u64 count + count doubles, in Network::for_each_state order.
/// Round trips are bit-exact.
std::vector<std::uint8_t> serialize_model(const MultiModalNet& net);
MultiModalNet deserialize_model(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const MultiModalNet& net);
MultiModalNet load_checkpoint(const std::string& path);

/// FNV-1a over the serialized model; used to assert a model was not touched.
std::uint64_t model_fingerprint(const MultiModalNet& net);

}  // namespace beamfl
