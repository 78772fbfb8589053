#include "beamfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "beamfl/error.hpp"

namespace beamfl {
namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (product(shape_) != values_.size()) {
    throw InputError("tensor shape holds " + std::to_string(product(shape_)) +
                     " values but " + std::to_string(values_.size()) + " were given");
  }
  require_finite(*this, "tensor construction");
}

std::size_t Tensor::cols() const {
  if (shape_.size() < 2) return shape_.empty() ? 0 : 1;
  return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1}, std::multiplies<>());
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(values_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(values_).subspan(r * c, c);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  const std::size_t c = cols();
  Tensor out = Tensor::matrix(indices.size(), c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                out.values_.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw InputError(std::string("non-finite value in ") + what);
  }
}

}  // namespace beamfl
