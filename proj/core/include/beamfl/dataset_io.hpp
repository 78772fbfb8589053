#pragma once

#include <string>

#include "beamfl/scenario.hpp"

namespace beamfl {

/// On-disk dataset layout (a directory):
///
///   manifest.json  {"format": "beamfl-dataset", "version": 1,
///                   "num_vehicles", "num_beams", "num_antennas", "gps_dim",
///                   "rgb_dims": [rows, cols], "lidar_dims": [z, y, x],
///                   "samples_per_vehicle": [...], "seed", "noise_power",
///                   "tx_power"}
///   samples.jsonl  one JSON object per line, in id order:
///                  {"id", "vehicle", "label" (1-based), "mask" ("GRL"/"G--"...),
///                   "synthetic", "los", "gps": [2], "rgb": [...],
///                   "lidar": [ints in {0,1,-1,-2}],
///                   "channel": [re0, im0, re1, im1, ...] (optional)}
///
/// Doubles are written in shortest round-trip form, so save -> load is
/// bit-exact. Every vehicle of an external export (e.g. one measurement
/// trial per vehicle) maps to one `vehicle` index.
void save_dataset(const std::string& dir, const Dataset& dataset);

/// Validates dimensions, LiDAR markers, label range and per-vehicle counts;
/// throws LoadError naming the offending sample row.
Dataset load_dataset(const std::string& dir);

}  // namespace beamfl
