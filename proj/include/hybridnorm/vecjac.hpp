#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hybridnorm/tensor.hpp"

namespace hybridnorm {

inline constexpr std::size_t kJacobianAxisCap = 4096;

inline void check_jacobian_axis(std::size_t n, const char* what) {
  if (n > kJacobianAxisCap) {
    throw CapacityError(std::string(what) + ": Jacobian axis of " + std::to_string(n) +
                        " entries exceeds the dense cap of " + std::to_string(kJacobianAxisCap));
  }
}

// d vec_r(Y) / d vec_r(X), numerator layout.
struct Jacobian {
  std::size_t out_rows = 0;
  std::size_t out_cols = 0;
  std::size_t in_rows = 0;
  std::size_t in_cols = 0;
  Matrix matrix;

  Jacobian() = default;

  Jacobian(std::size_t orows, std::size_t ocols, std::size_t irows, std::size_t icols, Matrix m)
      : out_rows(orows), out_cols(ocols), in_rows(irows), in_cols(icols), matrix(std::move(m)) {
    check_jacobian_axis(out_rows * out_cols, "Jacobian");
    check_jacobian_axis(in_rows * in_cols, "Jacobian");
    if (matrix.rows() != out_rows * out_cols || matrix.cols() != in_rows * in_cols) {
      throw ShapeError("Jacobian: matrix " + shape_str(matrix.rows(), matrix.cols()) +
                       " inconsistent with output " + shape_str(out_rows, out_cols) + " and input " +
                       shape_str(in_rows, in_cols));
    }
  }
};

struct BlockDiagonal {
  std::vector<Matrix> blocks;

  std::size_t rows() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.rows();
    return n;
  }

  std::size_t cols() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.cols();
    return n;
  }

  Matrix dense() const {
    Matrix out(rows(), cols());
    std::size_t r = 0, c = 0;
    for (const auto& b : blocks) {
      out.set_block(r, c, b);
      r += b.rows();
      c += b.cols();
    }
    return out;
  }
};

inline std::vector<double> vec_r(const Matrix& m) { return m.values(); }

inline Matrix unvec_r(std::span<const double> v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) throw ShapeError("unvec_r: length does not match " + shape_str(rows, cols));
  return Matrix(rows, cols, std::vector<double>(v.begin(), v.end()));
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      if (aij == 0.0) continue;
      for (std::size_t k = 0; k < b.rows(); ++k) {
        double* dst = out.data() + (i * b.rows() + k) * out.cols() + j * b.cols();
        const double* src = b.data() + k * b.cols();
        for (std::size_t l = 0; l < b.cols(); ++l) dst[l] = aij * src[l];
      }
    }
  }
  return out;
}

// K with K vec_r(W) = vec_r(W^T) for W of shape m x n.
inline Matrix commutation_matrix(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) throw ShapeError("commutation_matrix: m, n must be >= 1");
  Matrix k(m * n, m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) k(j * m + i, i * n + j) = 1.0;
  return k;
}

inline constexpr double kStochasticTol = 1e-9;

inline BlockDiagonal softmax_jacobian_blocks(const Matrix& a) {
  BlockDiagonal bd;
  bd.blocks.reserve(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto p = a.row(i);
    double sum = 0.0;
    for (double v : p) sum += v;
    if (std::abs(sum - 1.0) > kStochasticTol) {
      throw DomainError("softmax_jacobian: row " + std::to_string(i) + " sums to " +
                        std::to_string(sum) + ", not 1");
    }
    Matrix b(p.size(), p.size());
    for (std::size_t r = 0; r < p.size(); ++r) {
      for (std::size_t c = 0; c < p.size(); ++c) b(r, c) = -p[r] * p[c];
      b(r, r) += p[r];
    }
    bd.blocks.push_back(std::move(b));
  }
  return bd;
}

// Jacobian of row-wise softmax, evaluated at its output A.
inline Jacobian softmax_jacobian(const Matrix& a) {
  return Jacobian(a.rows(), a.cols(), a.rows(), a.cols(), softmax_jacobian_blocks(a).dense());
}

// (sqrt(d)/|x|) (I - x x^T / |x|^2)
inline Matrix rmsnorm_jacobian(std::span<const double> x) {
  const std::size_t d = x.size();
  const double n2 = [&] {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  }();
  if (!(n2 > 0.0)) throw DomainError("rmsnorm_jacobian: zero vector has no derivative");
  const double n = std::sqrt(n2);
  const double c = std::sqrt(double(d)) / n;
  Matrix j(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t k = 0; k < d; ++k) j(r, k) = -c * x[r] * x[k] / n2;
    j(r, r) += c;
  }
  return j;
}

inline BlockDiagonal rownorm_jacobian_blocks(const Matrix& x) {
  BlockDiagonal bd;
  bd.blocks.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    bool nonzero = false;
    for (double v : r) nonzero = nonzero || v != 0.0;
    if (!nonzero) throw DomainError("rownorm_jacobian: row " + std::to_string(i) + " is zero");
    bd.blocks.push_back(rmsnorm_jacobian(r));
  }
  return bd;
}

inline Jacobian rownorm_jacobian(const Matrix& x) {
  return Jacobian(x.rows(), x.cols(), x.rows(), x.cols(), rownorm_jacobian_blocks(x).dense());
}

// Jacobian of W -> A W B: A kron B^T.
inline Jacobian linear_map_jacobian(const Matrix& a, const Matrix& b) {
  return Jacobian(a.rows(), b.cols(), a.cols(), b.rows(), kron(a, b.transposed()));
}

using MatrixFunction = std::function<Matrix(const Matrix&)>;

inline constexpr double kFiniteDiffStep = 1e-5;

// Central differences, assembled column by column in vec_r order. The divisor is the
// representable step (x+h)-(x-h) rather than 2h.
inline Jacobian finite_diff_jacobian(const MatrixFunction& f, const Matrix& x, double h = kFiniteDiffStep) {
  if (!(h > 0.0)) throw DomainError("finite_diff_jacobian: step must be positive");
  check_jacobian_axis(x.size(), "finite_diff_jacobian");
  const Matrix y0 = f(x);
  check_jacobian_axis(y0.size(), "finite_diff_jacobian");
  Matrix j(y0.size(), x.size());
  Matrix xp = x;
  for (std::size_t idx = 0; idx < x.size(); ++idx) {
    const double orig = xp.data()[idx];
    const double hi = orig + h, lo = orig - h;
    xp.data()[idx] = hi;
    const Matrix yp = f(xp);
    xp.data()[idx] = lo;
    const Matrix ym = f(xp);
    xp.data()[idx] = orig;
    const double width = hi - lo;
    if (!yp.all_finite() || !ym.all_finite()) {
      throw DomainError("finite_diff_jacobian: non-finite output when perturbing index " +
                        std::to_string(idx));
    }
    if (!yp.same_shape(y0) || !ym.same_shape(y0)) {
      throw ShapeError("finite_diff_jacobian: output shape changed under perturbation");
    }
    for (std::size_t r = 0; r < y0.size(); ++r) j(r, idx) = (yp.data()[r] - ym.data()[r]) / width;
  }
  return Jacobian(y0.rows(), y0.cols(), x.rows(), x.cols(), std::move(j));
}

}  // namespace hybridnorm
