#pragma once

#include <string>

#include "beamfl/federation.hpp"

namespace beamfl {

/// Binary snapshot of a TrainingState ("BFLSTATE", version 1, little-endian).
/// Doubles are stored bit-exactly, so a resumed run continues identically.
void save_training_state(const std::string& path, const TrainingState& state);
TrainingState load_training_state(const std::string& path);

}  // namespace beamfl
