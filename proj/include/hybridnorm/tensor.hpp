#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hybridnorm/error.hpp"

namespace hybridnorm {

using EigenRowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMatrix>;
using EigenConstMap = Eigen::Map<const EigenRowMatrix>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  struct Unchecked {};

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw DomainError("Matrix: non-finite fill value");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_size();
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw DomainError("Matrix: non-finite entry at flat index " + std::to_string(i));
      }
    }
  }

  // Diagnostic outputs may carry NaN/Inf.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data, Unchecked)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_size();
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  static Matrix column_vector(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  EigenMap map() { return EigenMap(data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)); }
  EigenConstMap map() const {
    return EigenConstMap(data_.data(), Eigen::Index(rows_), Eigen::Index(cols_));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const {
    Matrix b(nr, nc);
    for (std::size_t i = 0; i < nr; ++i)
      std::copy_n(data_.data() + (r0 + i) * cols_ + c0, nc, b.data() + i * nc);
    return b;
  }

  void set_block(std::size_t r0, std::size_t c0, const Matrix& b) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      std::copy_n(b.data() + i * b.cols(), b.cols(), data_.data() + (r0 + i) * cols_ + c0);
  }

  void add_block(std::size_t r0, std::size_t c0, const Matrix& b) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) (*this)(r0 + i, c0 + j) += b(i, j);
  }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& o) {
    require_same(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Matrix& operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
  }

  bool operator==(const Matrix& o) const = default;

  void require_same(const Matrix& o, const char* what) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string(what) + ": shape " + shape_str(rows_, cols_) + " vs " +
                       shape_str(o.rows_, o.cols_));
    }
  }

 private:
  void check_size() const {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                       shape_str(rows_, cols_));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double c) { return a *= c; }
inline Matrix operator*(double c, Matrix a) { return a *= c; }

inline Matrix from_eigen(const EigenRowMatrix& e) {
  Matrix m(std::size_t(e.rows()), std::size_t(e.cols()));
  m.map() = e;
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                     shape_str(b.rows(), b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  if (a.cols() == 0) return c;
  c.map().noalias() = a.map() * b.map();
  return c;
}

// a^T b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T * " +
                     shape_str(b.rows(), b.cols()));
  }
  Matrix c(a.cols(), b.cols());
  if (a.rows() == 0) return c;
  c.map().noalias() = a.map().transpose() * b.map();
  return c;
}

// a b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * " +
                     shape_str(b.rows(), b.cols()) + "^T");
  }
  Matrix c(a.rows(), b.rows());
  if (a.cols() == 0) return c;
  c.map().noalias() = a.map() * b.map().transpose();
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  a.require_same(b, "hadamard");
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  return c;
}

inline double trace(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeError("trace: matrix not square");
  double t = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) t += m(i, i);
  return t;
}

inline double max_abs(const Matrix& m) {
  double r = 0.0;
  for (double v : m.flat()) r = std::max(r, std::abs(v));
  return r;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  a.require_same(b, "max_abs_diff");
  double r = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    r = std::max(r, std::abs(a.data()[i] - b.data()[i]));
  return r;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.flat()) s += v * v;
  return std::sqrt(s);
}

inline double frobenius_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline constexpr double kSpectralTol = 1e-10;
inline constexpr int kSpectralMaxIter = 10000;

// Largest singular value by power iteration on the Gram matrix. The start vector is
// taken from a repeatedly squared Gram matrix so that clustered top singular values
// still converge within the iteration budget.
inline double spectral_norm(const Matrix& m) {
  if (!m.all_finite()) throw DomainError("spectral_norm: non-finite input");
  if (m.empty()) return 0.0;
  const bool tall = m.rows() >= m.cols();
  EigenRowMatrix g = tall ? EigenRowMatrix(m.map().transpose() * m.map())
                          : EigenRowMatrix(m.map() * m.map().transpose());
  const double gmax = g.cwiseAbs().maxCoeff();
  if (gmax == 0.0) return 0.0;

  EigenRowMatrix c = g / gmax;
  for (int k = 0; k < 40; ++k) {
    EigenRowMatrix c2 = c * c;
    const double cm = c2.cwiseAbs().maxCoeff();
    if (!(cm > 0.0) || !std::isfinite(cm)) break;
    c = c2 / cm;
  }
  Eigen::Index best = 0;
  c.colwise().squaredNorm().maxCoeff(&best);
  Eigen::VectorXd v = c.col(best);
  if (!(v.norm() > 0.0)) v = Eigen::VectorXd::Ones(g.rows());
  v.normalize();

  double lambda = v.dot(g * v);
  for (int it = 0; it < kSpectralMaxIter; ++it) {
    Eigen::VectorXd w = g * v;
    const double wn = w.norm();
    if (wn == 0.0) return 0.0;
    v = w / wn;
    const double next = v.dot(g * v);
    if (std::abs(next - lambda) <= kSpectralTol * std::abs(next)) {
      return std::sqrt(std::max(next, 0.0));
    }
    lambda = next;
  }
  throw ConvergenceError("spectral_norm: power iteration did not converge in " +
                         std::to_string(kSpectralMaxIter) + " iterations");
}

// Descending singular values, min(rows, cols) of them.
inline std::vector<double> singular_values(const Matrix& m) {
  if (!m.all_finite()) throw DomainError("singular_values: non-finite input");
  if (m.empty()) return {};
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m.map()));
  const auto& s = svd.singularValues();
  return std::vector<double>(s.data(), s.data() + s.size());
}

// Returns 0 for numerically rank-deficient input.
inline double min_singular_value(const Matrix& m) {
  const auto s = singular_values(m);
  if (s.empty()) return 0.0;
  const double smax = s.front();
  const double smin = s.back();
  const double cutoff =
      smax * double(std::max(m.rows(), m.cols())) * std::numeric_limits<double>::epsilon();
  return smin <= cutoff ? 0.0 : smin;
}

struct NormParams {
  std::vector<double> alpha;
  double eps = 0.0;

  static NormParams ones(std::size_t d, double eps = 0.0) {
    return NormParams{std::vector<double>(d, 1.0), eps};
  }

  void validate(std::size_t d) const {
    if (alpha.size() != d) {
      throw ShapeError("NormParams: alpha length " + std::to_string(alpha.size()) +
                       " != normalized dim " + std::to_string(d));
    }
    if (!(eps >= 0.0)) throw DomainError("NormParams: eps must be >= 0");
  }
};

// alpha * x * sqrt(d) / sqrt(sum x^2 + d eps); 0/0 maps to 0.
inline void rms_norm_into(std::span<const double> x, const NormParams& p, std::span<double> out) {
  const std::size_t d = x.size();
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double denom = std::sqrt(ss + double(d) * p.eps);
  const double scale = denom > 0.0 ? std::sqrt(double(d)) / denom : 0.0;
  for (std::size_t i = 0; i < d; ++i) out[i] = p.alpha[i] * x[i] * scale;
}

inline std::vector<double> rms_norm(std::span<const double> x, const NormParams& p) {
  if (x.empty()) throw ShapeError("rms_norm: d must be >= 1");
  p.validate(x.size());
  std::vector<double> out(x.size());
  rms_norm_into(x, p, out);
  return out;
}

inline std::vector<double> rms_norm(std::span<const double> x) {
  return rms_norm(x, NormParams::ones(x.size()));
}

inline Matrix rms_norm_rows(const Matrix& x, const NormParams& p) {
  p.validate(x.cols());
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) rms_norm_into(x.row(i), p, out.row(i));
  return out;
}

inline Matrix rms_norm_rows(const Matrix& x) { return rms_norm_rows(x, NormParams::ones(x.cols())); }

inline std::vector<double> layer_norm(std::span<const double> x, const NormParams& p) {
  if (x.size() < 2) throw ShapeError("layer_norm: d must be >= 2");
  p.validate(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  std::vector<double> centered(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) centered[i] = x[i] - mean;
  std::vector<double> out(x.size());
  rms_norm_into(centered, p, out);
  return out;
}

inline std::vector<double> layer_norm(std::span<const double> x) {
  return layer_norm(x, NormParams::ones(x.size()));
}

inline Matrix layer_norm_rows(const Matrix& x, const NormParams& p) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = layer_norm(x.row(i), p);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix layer_norm_rows(const Matrix& x) { return layer_norm_rows(x, NormParams::ones(x.cols())); }

// P = I - (1/d) 1 1^T
inline Matrix centering_matrix(std::size_t d) {
  Matrix p(d, d, -1.0 / double(d));
  for (std::size_t i = 0; i < d; ++i) p(i, i) += 1.0;
  return p;
}

inline void softmax_into(std::span<const double> z, std::size_t count, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < count; ++j) mx = std::max(mx, z[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < count; ++j) {
    out[j] = std::exp(z[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < count; ++j) out[j] /= sum;
  for (std::size_t j = count; j < out.size(); ++j) out[j] = 0.0;
}

// Row-wise softmax. With causal, row i only sees columns 0..i.
inline Matrix softmax_rows(const Matrix& m, bool causal = false) {
  if (causal && m.rows() != m.cols()) throw ShapeError("softmax_rows: causal mask needs a square input");
  if (!m.all_finite()) throw DomainError("softmax_rows: non-finite input");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const std::size_t count = causal ? i + 1 : m.cols();
    softmax_into(m.row(i), count, out.row(i));
  }
  return out;
}

}  // namespace hybridnorm
