#include "beamfl/network.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "beamfl/error.hpp"

namespace beamfl {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstRowVector = Eigen::Map<const Eigen::RowVectorXd>;
using RowVectorMap = Eigen::Map<Eigen::RowVectorXd>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

std::size_t layer_width_in(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer>) {
          return l.weight.rows();
        } else if constexpr (std::is_same_v<T, BNLayerState>) {
          return l.width();
        } else {
          return l.width;
        }
      },
      layer);
}

std::size_t layer_width_out(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return d->weight.cols();
  return layer_width_in(layer);
}

void require_width(const std::vector<double>& v, std::size_t width, const char* what) {
  if (!v.empty() && v.size() != width) {
    throw InputError(std::string(what) + " width mismatch");
  }
}

}  // namespace

std::vector<double>& GradientSet::at(ParamKey key) {
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i] == key) return params[i];
  }
  throw InputError("no gradient for requested parameter");
}

const std::vector<double>& GradientSet::at(ParamKey key) const {
  return const_cast<GradientSet*>(this)->at(key);
}

Network Network::build(std::span<const LayerSpec> specs, std::mt19937_64& rng, BNOptions bn) {
  if (specs.empty()) throw ConfigError("network needs at least one layer");
  if (!(bn.eps > 0.0)) throw ConfigError("batch-norm eps must be positive");
  if (!(bn.momentum > 0.0 && bn.momentum < 1.0)) {
    throw ConfigError("batch-norm momentum must lie in (0,1)");
  }
  Network net;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.fan_in == 0 || s.fan_out == 0) {
      throw ConfigError("layer " + std::to_string(i) + " has a zero dimension");
    }
    if (i > 0 && specs[i - 1].fan_out != s.fan_in) {
      throw ConfigError("layer " + std::to_string(i) + " fan_in " + std::to_string(s.fan_in) +
                        " does not match previous fan_out " +
                        std::to_string(specs[i - 1].fan_out));
    }
    switch (s.kind) {
      case LayerKind::kDense: {
        DenseLayer d;
        d.weight = Tensor::matrix(s.fan_in, s.fan_out);
        const double limit = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (double& w : d.weight.values()) w = dist(rng);
        d.bias.assign(s.fan_out, 0.0);
        net.layers_.emplace_back(std::move(d));
        break;
      }
      case LayerKind::kBatchNorm: {
        if (s.fan_in != s.fan_out) throw ConfigError("batch-norm layer must keep its width");
        BNLayerState b;
        b.running_mean.assign(s.fan_in, 0.0);
        b.running_var.assign(s.fan_in, 1.0);
        b.gamma.assign(s.fan_in, 1.0);
        b.beta.assign(s.fan_in, 0.0);
        b.momentum = bn.momentum;
        b.eps = bn.eps;
        net.layers_.emplace_back(std::move(b));
        break;
      }
      case LayerKind::kRelu: {
        if (s.fan_in != s.fan_out) throw ConfigError("relu layer must keep its width");
        net.layers_.emplace_back(ReluLayer{s.fan_in});
        break;
      }
    }
  }
  return net;
}

std::vector<LayerSpec> Network::specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers_.size());
  for (const auto& layer : layers_) {
    LayerKind kind = LayerKind::kRelu;
    if (std::holds_alternative<DenseLayer>(layer)) kind = LayerKind::kDense;
    if (std::holds_alternative<BNLayerState>(layer)) kind = LayerKind::kBatchNorm;
    out.push_back({kind, layer_width_in(layer), layer_width_out(layer)});
  }
  return out;
}

std::size_t Network::input_dim() const {
  return layers_.empty() ? 0 : layer_width_in(layers_.front());
}

std::size_t Network::output_dim() const {
  return layers_.empty() ? 0 : layer_width_out(layers_.back());
}

std::size_t Network::num_bn_layers() const {
  return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const Layer& l) {
    return std::holds_alternative<BNLayerState>(l);
  }));
}

ForwardResult Network::run(const Tensor& input, Mode mode) const {
  if (input.rank() != 2 || input.cols() != input_dim()) {
    throw ConfigError("network input width " + std::to_string(input.cols()) +
                      " does not match first layer fan_in " + std::to_string(input_dim()));
  }
  if (input.rows() == 0) throw InputError("network input batch is empty");

  ForwardResult result;
  ForwardTrace& trace = result.trace;
  trace.mode = mode;
  trace.inputs.reserve(layers_.size());
  trace.normalized.resize(layers_.size());
  trace.inv_std.resize(layers_.size());
  trace.batch_mean.resize(layers_.size());

  const std::size_t n = input.rows();
  Tensor x = input;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& layer = layers_[li];
    Tensor y;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      y = Tensor::matrix(n, d->weight.cols());
      auto ym = as_matrix(y);
      ym.noalias() = as_matrix(x) * as_matrix(d->weight);
      ym.rowwise() += ConstRowVector(d->bias.data(), static_cast<Eigen::Index>(d->bias.size()));
    } else if (const auto* bn = std::get_if<BNLayerState>(&layer)) {
      const std::size_t w = bn->width();
      BatchStats stats;
      stats.mean.assign(w, 0.0);
      stats.var.assign(w, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) stats.mean[c] += x(r, c);
      }
      for (double& m : stats.mean) m /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double dv = x(r, c) - stats.mean[c];
          stats.var[c] += dv * dv;
        }
      }
      for (double& v : stats.var) v /= static_cast<double>(n);

      const std::vector<double>& use_mean = mode == Mode::kTrain ? stats.mean : bn->running_mean;
      const std::vector<double>& use_var = mode == Mode::kTrain ? stats.var : bn->running_var;
      std::vector<double> inv_std(w);
      for (std::size_t c = 0; c < w; ++c) inv_std[c] = 1.0 / std::sqrt(use_var[c] + bn->eps);

      Tensor xhat = Tensor::matrix(n, w);
      y = Tensor::matrix(n, w);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double h = (x(r, c) - use_mean[c]) * inv_std[c];
          xhat(r, c) = h;
          y(r, c) = bn->gamma[c] * h + bn->beta[c];
        }
      }
      trace.normalized[li] = std::move(xhat);
      trace.inv_std[li] = std::move(inv_std);
      trace.batch_mean[li] = stats.mean;
      result.batch_stats.push_back(std::move(stats));
    } else {
      y = x;
      for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    }
    trace.inputs.push_back(std::move(x));
    x = std::move(y);
  }
  result.output = std::move(x);
  return result;
}

ForwardResult Network::forward(const Tensor& input, Mode mode) {
  ForwardResult result = run(input, mode);
  if (mode == Mode::kTrain) commit_running_stats(result.batch_stats);
  return result;
}

void Network::commit_running_stats(std::span<const BatchStats> stats) {
  std::size_t bi = 0;
  for (auto& layer : layers_) {
    auto* bn = std::get_if<BNLayerState>(&layer);
    if (bn == nullptr) continue;
    if (bi >= stats.size()) throw InputError("missing batch statistics for BN layer");
    const BatchStats& s = stats[bi++];
    const double m = bn->momentum;
    for (std::size_t c = 0; c < bn->width(); ++c) {
      bn->running_mean[c] = (1.0 - m) * bn->running_mean[c] + m * s.mean[c];
      bn->running_var[c] = (1.0 - m) * bn->running_var[c] + m * s.var[c];
    }
  }
}

GradientSet Network::backward(const ForwardTrace& trace, const Tensor& grad_output,
                              std::span<const StatGrad> stat_grads, bool want_input_grad) const {
  if (trace.inputs.size() != layers_.size()) throw InputError("trace does not match network");
  const std::size_t n = trace.inputs.front().rows();
  if (grad_output.rows() != n || grad_output.cols() != output_dim()) {
    throw InputError("upstream gradient shape does not match network output");
  }

  GradientSet grads;
  grads.keys = parameter_keys();
  grads.params.resize(grads.keys.size());

  // Parameter slots are emitted in layer order; walk them backwards.
  std::size_t slot = grads.keys.size();
  std::size_t bn_index = num_bn_layers();
  Tensor dy = grad_output;

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& layer = layers_[li];
    const Tensor& x = trace.inputs[li];
    const bool need_dx = li > 0 || want_input_grad;
    Tensor dx;

    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      slot -= 2;
      std::vector<double>& dw = grads.params[slot];
      std::vector<double>& db = grads.params[slot + 1];
      dw.assign(d->weight.size(), 0.0);
      db.assign(d->bias.size(), 0.0);
      const auto dym = as_matrix(dy);
      MatrixMap(dw.data(), static_cast<Eigen::Index>(d->weight.rows()),
                static_cast<Eigen::Index>(d->weight.cols()))
          .noalias() = as_matrix(x).transpose() * dym;
      RowVectorMap(db.data(), static_cast<Eigen::Index>(db.size())) = dym.colwise().sum();
      if (need_dx) {
        dx = Tensor::matrix(n, d->weight.rows());
        as_matrix(dx).noalias() = dym * as_matrix(d->weight).transpose();
      }
    } else if (const auto* bn = std::get_if<BNLayerState>(&layer)) {
      --bn_index;
      slot -= 2;
      const std::size_t w = bn->width();
      const Tensor& xhat = trace.normalized[li];
      const std::vector<double>& inv_std = trace.inv_std[li];
      std::vector<double>& dgamma = grads.params[slot];
      std::vector<double>& dbeta = grads.params[slot + 1];
      dgamma.assign(w, 0.0);
      dbeta.assign(w, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          dgamma[c] += dy(r, c) * xhat(r, c);
          dbeta[c] += dy(r, c);
        }
      }
      dx = Tensor::matrix(n, w);
      const double nn = static_cast<double>(n);
      if (trace.mode == Mode::kTrain) {
        // Mean and variance depend on the batch, so every row couples.
        std::vector<double> sum_dxhat(w, 0.0);
        std::vector<double> sum_dxhat_xhat(w, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            const double g = dy(r, c) * bn->gamma[c];
            sum_dxhat[c] += g;
            sum_dxhat_xhat[c] += g * xhat(r, c);
          }
        }
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            const double g = dy(r, c) * bn->gamma[c];
            dx(r, c) = inv_std[c] / nn * (nn * g - sum_dxhat[c] - xhat(r, c) * sum_dxhat_xhat[c]);
          }
        }
      } else {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) dx(r, c) = dy(r, c) * bn->gamma[c] * inv_std[c];
        }
      }
      if (bn_index < stat_grads.size()) {
        const StatGrad& sg = stat_grads[bn_index];
        require_width(sg.d_mean, w, "stat gradient (mean)");
        require_width(sg.d_var, w, "stat gradient (var)");
        const std::vector<double>& mu = trace.batch_mean[li];
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            double g = 0.0;
            if (!sg.d_mean.empty()) g += sg.d_mean[c] / nn;
            if (!sg.d_var.empty()) g += sg.d_var[c] * 2.0 * (x(r, c) - mu[c]) / nn;
            dx(r, c) += g;
          }
        }
      }
    } else {
      dx = dy;
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!(x[i] > 0.0)) dx[i] = 0.0;
      }
    }
    dy = std::move(dx);
  }
  if (want_input_grad) grads.input = std::move(dy);
  return grads;
}

std::vector<ParamKey> Network::parameter_keys() const {
  std::vector<ParamKey> keys;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    if (std::holds_alternative<DenseLayer>(layers_[li])) {
      keys.push_back({li, ParamRole::kWeight});
      keys.push_back({li, ParamRole::kBias});
    } else if (std::holds_alternative<BNLayerState>(layers_[li])) {
      keys.push_back({li, ParamRole::kGamma});
      keys.push_back({li, ParamRole::kBeta});
    }
  }
  return keys;
}

std::vector<std::span<double>> Network::parameters() {
  std::vector<std::span<double>> out;
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      out.emplace_back(d->weight.values());
      out.emplace_back(d->bias);
    } else if (auto* bn = std::get_if<BNLayerState>(&layer)) {
      out.emplace_back(bn->gamma);
      out.emplace_back(bn->beta);
    }
  }
  return out;
}

std::vector<std::span<const double>> Network::parameters() const {
  std::vector<std::span<const double>> out;
  for (const auto& layer : layers_) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      out.emplace_back(d->weight.values());
      out.emplace_back(d->bias);
    } else if (const auto* bn = std::get_if<BNLayerState>(&layer)) {
      out.emplace_back(bn->gamma);
      out.emplace_back(bn->beta);
    }
  }
  return out;
}

std::vector<BNLayerState*> Network::bn_layers() {
  std::vector<BNLayerState*> out;
  for (auto& layer : layers_) {
    if (auto* bn = std::get_if<BNLayerState>(&layer)) out.push_back(bn);
  }
  return out;
}

std::vector<const BNLayerState*> Network::bn_layers() const {
  std::vector<const BNLayerState*> out;
  for (const auto& layer : layers_) {
    if (const auto* bn = std::get_if<BNLayerState>(&layer)) out.push_back(bn);
  }
  return out;
}

std::size_t Network::trainable_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.size();
  return total;
}

std::size_t Network::state_count() const {
  std::size_t total = 0;
  for_each_state([&](std::span<const double> s) { total += s.size(); });
  return total;
}

}  // namespace beamfl
