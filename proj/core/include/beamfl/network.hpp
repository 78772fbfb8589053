#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "beamfl/tensor.hpp"

namespace beamfl {

enum class Mode { kTrain, kEval };

enum class LayerKind { kDense, kBatchNorm, kRelu };

struct LayerSpec {
  LayerKind kind = LayerKind::kDense;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

/// y = x W + b with W stored fan_in x fan_out.
struct DenseLayer {
  Tensor weight;
  std::vector<double> bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Batch normalization with biased (1/N) batch variance. Running variance
/// uses the same convention.
struct BNLayerState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  std::vector<double> gamma;
  std::vector<double> beta;
  double momentum = 0.1;
  double eps = 1e-5;

  std::size_t width() const { return gamma.size(); }
  friend bool operator==(const BNLayerState&, const BNLayerState&) = default;
};

struct ReluLayer {
  std::size_t width = 0;
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};

using Layer = std::variant<DenseLayer, BNLayerState, ReluLayer>;

struct BNOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

enum class ParamRole : std::uint8_t { kWeight, kBias, kGamma, kBeta };

struct ParamKey {
  std::size_t layer = 0;
  ParamRole role = ParamRole::kWeight;
  friend bool operator==(const ParamKey&, const ParamKey&) = default;
};

/// Per-channel mean and biased variance of a BN layer's input batch.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Upstream gradient of some loss with respect to one BN layer's batch
/// statistics. Empty vectors mean "no contribution".
struct StatGrad {
  std::vector<double> d_mean;
  std::vector<double> d_var;
};

struct ForwardTrace {
  Mode mode = Mode::kTrain;
  std::vector<Tensor> inputs;                // input of every layer
  std::vector<Tensor> normalized;            // BN x-hat (empty for other kinds)
  std::vector<std::vector<double>> inv_std;  // BN 1/sqrt(var+eps) actually used
  std::vector<std::vector<double>> batch_mean;
};

struct ForwardResult {
  Tensor output;
  ForwardTrace trace;
  std::vector<BatchStats> batch_stats;  // one entry per BN layer, in order
};

/// Gradients aligned with Network::parameter_keys(), plus the gradient
/// with respect to the network input (empty when not requested).
struct GradientSet {
  std::vector<ParamKey> keys;
  std::vector<std::vector<double>> params;
  Tensor input;

  std::vector<double>& at(ParamKey key);
  const std::vector<double>& at(ParamKey key) const;
};

/// A feed-forward stack of dense, batch-norm and ReLU layers.
///
/// Instances are single-writer. `run` and `backward` are const and safe to
/// call concurrently on the same instance; `forward` in train mode writes
/// the running statistics.
class Network {
 public:
  Network() = default;

  /// Validates chaining (fan_out of layer i == fan_in of layer i+1, BN and
  /// ReLU keep width) and initializes dense weights uniformly in
  /// +-sqrt(6/(fan_in+fan_out)). Throws ConfigError on inconsistency.
  static Network build(std::span<const LayerSpec> specs, std::mt19937_64& rng,
                       BNOptions bn = {});

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  std::vector<LayerSpec> specs() const;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t num_bn_layers() const;

  ForwardResult run(const Tensor& input, Mode mode) const;
  ForwardResult forward(const Tensor& input, Mode mode);

  /// running <- (1 - momentum) * running + momentum * batch, per BN layer.
  void commit_running_stats(std::span<const BatchStats> stats);

  GradientSet backward(const ForwardTrace& trace, const Tensor& grad_output,
                       std::span<const StatGrad> stat_grads = {},
                       bool want_input_grad = true) const;

  std::vector<ParamKey> parameter_keys() const;
  std::vector<std::span<double>> parameters();
  std::vector<std::span<const double>> parameters() const;

  std::vector<BNLayerState*> bn_layers();
  std::vector<const BNLayerState*> bn_layers() const;

  /// Learnable scalars (weights, biases, gamma, beta).
  std::size_t trainable_count() const;
  /// Everything a checkpoint or transfer carries: trainable plus BN
  /// running mean/variance.
  std::size_t state_count() const;

  /// Visits every state scalar in a fixed order (layer order; weight, bias,
  /// gamma, beta, running mean, running var).
  template <typename Fn>
  void for_each_state(Fn&& fn);
  template <typename Fn>
  void for_each_state(Fn&& fn) const;

  friend bool operator==(const Network&, const Network&) = default;

 private:
  std::vector<Layer> layers_;
};

template <typename Fn>
void Network::for_each_state(Fn&& fn) {
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      fn(d->weight.values());
      fn(std::span<double>(d->bias));
    } else if (auto* bn = std::get_if<BNLayerState>(&layer)) {
      fn(std::span<double>(bn->gamma));
      fn(std::span<double>(bn->beta));
      fn(std::span<double>(bn->running_mean));
      fn(std::span<double>(bn->running_var));
    }
  }
}

template <typename Fn>
void Network::for_each_state(Fn&& fn) const {
  for (const auto& layer : layers_) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      fn(d->weight.values());
      fn(std::span<const double>(d->bias));
    } else if (const auto* bn = std::get_if<BNLayerState>(&layer)) {
      fn(std::span<const double>(bn->gamma));
      fn(std::span<const double>(bn->beta));
      fn(std::span<const double>(bn->running_mean));
      fn(std::span<const double>(bn->running_var));
    }
  }
}

}  // namespace beamfl
