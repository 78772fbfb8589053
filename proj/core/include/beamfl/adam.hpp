#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace beamfl {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and must keep the same parameter layout afterwards.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  void step(std::span<const std::span<double>> params,
            std::span<const std::vector<double>> grads);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

  void reset() {
    m_.clear();
    v_.clear();
    steps_ = 0;
  }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t steps_ = 0;
};

/// Plain gradient descent: p <- p - lr * g.
void sgd_step(std::span<const std::span<double>> params,
              std::span<const std::vector<double>> grads, double learning_rate);

}  // namespace beamfl
