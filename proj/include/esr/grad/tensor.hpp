#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace esr::grad {

/// Row-major dense storage used for every value and gradient in the engine.
template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Index = Eigen::Index;

/// A rank-2 (or scalar, 1x1) value with an autodiff flag.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix data, bool requires_grad = false)
      : data_(std::move(data)), requires_grad_(requires_grad) {}

  std::array<Index, 2> shape() const { return {data_.rows(), data_.cols()}; }
  Index size() const { return data_.size(); }
  bool is_scalar() const { return data_.rows() == 1 && data_.cols() == 1; }

  const Matrix& data() const { return data_; }
  Matrix& data() { return data_; }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

 private:
  Matrix data_;
  bool requires_grad_ = false;
};

/// A named trainable matrix with its accumulated gradient.
struct Parameter {
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Parameters keyed by name; iteration order is lexicographic and therefore stable.
using ParameterSet = std::map<std::string, Parameter>;

inline Index parameter_count(const ParameterSet& params) {
  Index n = 0;
  for (const auto& [_, p] : params) n += p.value.size();
  return n;
}

/// Gaussian fill with a fixed engine; the draw order is row-major.
inline Matrix gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace esr::grad
