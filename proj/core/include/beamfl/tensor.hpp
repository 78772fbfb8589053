#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace beamfl {

/// Dense row-major array of doubles. Networks in this library only ever
/// see rank-2 tensors (batch x features); higher ranks exist for raw
/// sensor grids before flattening.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  /// Throws InputError if the shape does not match the value count or a
  /// value is NaN/Inf.
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  /// Product of all trailing dimensions.
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  void fill(double v);
  bool all_finite() const;

  /// Copies the listed rows into a new (indices.size() x cols) tensor.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

/// Throws InputError naming `what` when the tensor holds a NaN or Inf.
void require_finite(const Tensor& t, const char* what);

}  // namespace beamfl
