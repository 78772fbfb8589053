#pragma once

#include <stdexcept>
#include <string>

namespace beamfl {

/// Invalid or inconsistent configuration (dimensions, presets, options).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller handed an operation data that violates its preconditions.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Branch bookkeeping went wrong (missing branch on merge, bad upload).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset, checkpoint, or manifest on disk.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or activation became non-finite during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace beamfl
