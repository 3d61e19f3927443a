#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "safer/error.hpp"

namespace safer {

// Dense row-major matrix of doubles. Row vectors are 1 x n matrices so the
// whole library moves a single type around.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw ShapeError("matrix dimensions must be nonnegative");
  }

  static Matrix zeros(int rows, int cols) { return Matrix(rows, cols, 0.0); }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Matrix();
    Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (int i = 0; i < m.rows_; ++i) {
      if (static_cast<int>(rows[i].size()) != m.cols_)
        throw ShapeError("from_rows: ragged row " + std::to_string(i));
      for (int j = 0; j < m.cols_; ++j) m(i, j) = rows[i][j];
    }
    return m;
  }

  static Matrix row_vector(const std::vector<double>& v) {
    Matrix m(1, static_cast<int>(v.size()));
    for (int j = 0; j < m.cols_; ++j) m(0, j) = v[j];
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }

  double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

  double& at(int i, int j) {
    check_index(i, j);
    return (*this)(i, j);
  }
  double at(int i, int j) const {
    check_index(i, j);
    return (*this)(i, j);
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  std::vector<double> row_as_vector(int i) const {
    check_index(i, 0);
    return std::vector<double>(data_.begin() + static_cast<size_t>(i) * cols_,
                               data_.begin() + static_cast<size_t>(i + 1) * cols_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void check_index(int i, int j) const {
    if (i < 0 || i >= rows_ || j < 0 || j >= cols_)
      throw IndexError("matrix index (" + std::to_string(i) + "," + std::to_string(j) +
                       ") out of range for " + shape_str());
  }

  int rows_;
  int cols_;
  std::vector<double> data_;
};

// C = A * B with an i-k-j loop so the inner loop walks both B and C rows
// contiguously.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
  Matrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    double* crow = c.data() + static_cast<size_t>(i) * c.cols();
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data() + static_cast<size_t>(k) * b.cols();
      for (int j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// C = A * B^T. Both operands are walked row-wise.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + a.shape_str() + " * (" + b.shape_str() + ")^T");
  Matrix c(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    const double* arow = a.data() + static_cast<size_t>(i) * a.cols();
    for (int j = 0; j < b.rows(); ++j) {
      const double* brow = b.data() + static_cast<size_t>(j) * b.cols();
      double s = 0.0;
      for (int k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

// C = A^T * B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: (" + a.shape_str() + ")^T * " + b.shape_str());
  Matrix c(a.cols(), b.cols());
  for (int k = 0; k < a.rows(); ++k) {
    const double* arow = a.data() + static_cast<size_t>(k) * a.cols();
    const double* brow = b.data() + static_cast<size_t>(k) * b.cols();
    for (int i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.data() + static_cast<size_t>(i) * c.cols();
      for (int j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("add: " + a.shape_str() + " vs " + b.shape_str());
  Matrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: " + a.shape_str() + " vs " + b.shape_str());
  Matrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("hadamard: " + a.shape_str() + " vs " + b.shape_str());
  Matrix c = a;
  for (size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i] * a.data()[i];
  return std::sqrt(s);
}

// Gaussian init with sd = 1/sqrt(fan_in), the scale that keeps pre-activation
// variance near one for the layer widths used here.
inline Matrix gaussian_init(int rows, int cols, double sd, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> normal(0.0, sd);
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

// Largest singular value by power iteration on A^T A; deterministic start.
inline double spectral_norm(const Matrix& a, int iters = 100) {
  if (a.rows() == 0 || a.cols() == 0) return 0.0;
  std::vector<double> v(a.cols(), 1.0 / std::sqrt(static_cast<double>(a.cols())));
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    std::vector<double> u(a.rows(), 0.0);
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) u[i] += a(i, j) * v[j];
    double un = 0.0;
    for (double x : u) un += x * x;
    un = std::sqrt(un);
    if (un == 0.0) return 0.0;
    for (double& x : u) x /= un;
    std::vector<double> w(a.cols(), 0.0);
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) w[j] += a(i, j) * u[i];
    double wn = 0.0;
    for (double x : w) wn += x * x;
    wn = std::sqrt(wn);
    if (wn == 0.0) return 0.0;
    for (double& x : w) x /= wn;
    v = w;
    sigma = wn;
  }
  return sigma;
}

// Splitmix-style hash for deriving independent RNG streams from a master seed
// plus stream labels. Components are folded sequentially, so the result is
// order-sensitive: mix_seed(a, b) and mix_seed(b, a) differ.
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
  uint64_t z = 0x9e3779b97f4a7c15ULL;
  for (uint64_t salt : {a, b, c, d}) {
    z = (z ^ salt) * 0xbf58476d1ce4e5b9ULL;
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0x94d049bb133111ebULL;
    z = z ^ (z >> 31);
  }
  return z;
}

}  // namespace safer
