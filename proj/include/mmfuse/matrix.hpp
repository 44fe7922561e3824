#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/errors.hpp"

#ifndef MMFUSE_REAL
#define MMFUSE_REAL double
#endif

namespace mmfuse {

// Scalar type for every matrix in the library. Gradient checks assume double.
using Real = MMFUSE_REAL;

/// Dense row-major matrix. Rows index sequence positions, columns features.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  Real operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  Real& operator[](std::size_t k) { return data_[k]; }
  Real operator[](std::size_t k) const { return data_[k]; }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::span<Real> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const Real> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "operator+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }

  bool operator==(const Matrix& o) const = default;

  void require_same(const Matrix& o, const char* what) const {
    if (!same_shape(o)) {
      throw DimensionError(std::string(what) + ": shape mismatch " + shape() + " vs " + o.shape());
    }
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

inline std::string to_string(const Matrix& m) {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << (i ? "\n[" : "[");
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << m(i, j);
    os << "]";
  }
  return os.str();
}

// Plain value kernels. The differentiable versions in autodiff.hpp wrap these.
namespace kernel {

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + a.shape() + " x " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    Real* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = pa[i * k + p];
      if (av == Real(0)) continue;
      const Real* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: row counts differ, " + a.shape() + " vs " + b.shape());
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* po = out.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* arow = pa + r * k;
    const Real* brow = pb + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const Real av = arow[i];
      if (av == Real(0)) continue;
      Real* orow = po + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts differ, " + a.shape() + " vs " + b.shape());
  }
  Matrix out(a.rows(), b.rows());
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const Real* arow = pa + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const Real* brow = pb + j * k;
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const Real mx = *std::max_element(in.begin(), in.end());
    Real s = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (auto& v : o) v /= s;
  }
  return out;
}

// Row-wise log(sum(exp(.))), returned as a column.
inline Matrix logsumexp_rows(const Matrix& a) {
  Matrix out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    const Real mx = *std::max_element(in.begin(), in.end());
    Real s = 0;
    for (Real v : in) s += std::exp(v - mx);
    out(i, 0) = mx + std::log(s);
  }
  return out;
}

inline Matrix mean_rows(const Matrix& a) {
  Matrix out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) /= static_cast<Real>(a.rows());
  return out;
}

inline Matrix repeat_rows(const Matrix& row, std::size_t n) {
  if (row.rows() != 1) throw DimensionError("repeat_rows: expected 1xD, got " + row.shape());
  Matrix out(n, row.cols());
  for (std::size_t i = 0; i < n; ++i) std::copy(row.data().begin(), row.data().end(), out.row(i).begin());
  return out;
}

inline Matrix concat_cols(const std::vector<const Matrix*>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t n = parts.front()->rows();
  std::size_t width = 0;
  for (const Matrix* p : parts) {
    if (p->rows() != n) {
      throw DimensionError("concat_cols: row counts differ, " + parts.front()->shape() + " vs " + p->shape());
    }
    width += p->cols();
  }
  Matrix out(n, width);
  std::size_t off = 0;
  for (const Matrix* p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      std::copy(p->row(i).begin(), p->row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += p->cols();
  }
  return out;
}

inline Matrix concat_rows(const std::vector<const Matrix*>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t d = parts.front()->cols();
  std::size_t height = 0;
  for (const Matrix* p : parts) {
    if (p->cols() != d) {
      throw DimensionError("concat_rows: column counts differ, " + parts.front()->shape() + " vs " + p->shape());
    }
    height += p->rows();
  }
  Matrix out(height, d);
  auto it = out.data().begin();
  for (const Matrix* p : parts) it = std::copy(p->data().begin(), p->data().end(), it);
  return out;
}

inline Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.cols()) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + a.shape());
  }
  Matrix out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

inline Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows()) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + a.shape());
  }
  Matrix out(end - begin, a.cols());
  std::copy(a.row(begin).begin(), a.row(end - 1).end(), out.data().begin());
  return out;
}

template <class F>
Matrix map(const Matrix& a, F&& f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k]);
  return out;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](Real v) { return std::isfinite(v); });
}

inline Real max_abs_diff(const Matrix& a, const Matrix& b) {
  a.require_same(b, "max_abs_diff");
  Real m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace kernel
}  // namespace mmfuse
