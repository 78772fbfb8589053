#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "beamfl/tensor.hpp"

namespace beamfl {

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits, same shape as logits
};

/// Row-wise softmax.
Tensor softmax(const Tensor& logits);

/// Mean cross-entropy between target distributions and softmax(logits):
/// -(1/N) sum_n sum_m t[n,m] log p[n,m]. Gradient is (p - t) / N.
/// Throws InputError if a target row does not sum to 1 within 1e-6.
LossAndGrad softmax_cross_entropy(const Tensor& logits, const Tensor& targets);

/// One-hot targets for 0-based labels.
Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

/// Argmax per row; ties resolve to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& t);

}  // namespace beamfl
