#include "beamfl/adam.hpp"

#include <cmath>

#include "beamfl/error.hpp"

namespace beamfl {
namespace {

void check_layout(std::span<const std::span<double>> params,
                  std::span<const std::vector<double>> grads) {
  if (params.size() != grads.size()) throw InputError("parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) throw InputError("parameter/gradient shape mismatch");
  }
}

}  // namespace

void AdamState::step(std::span<const std::span<double>> params,
                     std::span<const std::vector<double>> grads) {
  check_layout(params, grads);
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].size(), 0.0);
      v_[i].assign(params[i].size(), 0.0);
    }
  } else if (m_.size() != params.size()) {
    throw InputError("optimizer state layout changed between steps");
  }
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double t = static_cast<double>(steps_);
  const double corr1 = 1.0 - std::pow(b1, t);
  const double corr2 = 1.0 - std::pow(b2, t);
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<double> p = params[i];
    const std::vector<double>& g = grads[i];
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    if (m.size() != p.size()) throw InputError("optimizer state shape changed between steps");
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double m_hat = m[k] / corr1;
      const double v_hat = v[k] / corr2;
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void sgd_step(std::span<const std::span<double>> params,
              std::span<const std::vector<double>> grads, double learning_rate) {
  check_layout(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      params[i][k] -= learning_rate * grads[i][k];
    }
  }
}

}  // namespace beamfl
