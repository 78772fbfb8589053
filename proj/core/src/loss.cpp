#include "beamfl/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "beamfl/error.hpp"

namespace beamfl {

Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t m = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = p.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (std::size_t c = 0; c < m; ++c) row[c] /= z;
  }
  return p;
}

LossAndGrad softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) throw InputError("logits and targets differ in shape");
  require_finite(logits, "logits");
  const std::size_t n = logits.rows();
  const std::size_t m = logits.cols();
  if (n == 0) throw InputError("cross-entropy on an empty batch");
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double t : targets.row(r)) {
      if (t < 0.0) throw InputError("negative target probability in row " + std::to_string(r));
      s += t;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw InputError("target row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }

  LossAndGrad out;
  out.grad = Tensor::matrix(n, m);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_z = mx + std::log(sum);
    for (std::size_t c = 0; c < m; ++c) {
      const double t = targets(r, c);
      const double log_p = z[c] - log_z;
      if (t > 0.0) total -= t * log_p;
      out.grad(r, c) = (std::exp(log_p) - t) * inv_n;
    }
  }
  out.loss = total * inv_n;
  return out;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  Tensor t = Tensor::matrix(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw InputError("label out of range for one-hot");
    t(i, labels[i]) = 1.0;
  }
  return t;
}

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    // max_element returns the first maximum, which is the tie-break we want.
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace beamfl
