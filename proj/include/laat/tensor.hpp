// Dense row-major tensor of doubles. Only what the encoder, losses and
// attacks need; every op here is 2-D unless stated otherwise.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace laat {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw std::invalid_argument("tensor shape " + shape_string(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("from_rows: no rows");
    const std::size_t cols = rows.front().size();
    Tensor t = matrix(rows.size(), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != cols) {
        throw std::invalid_argument("from_rows: ragged rows");
      }
      std::copy(rows[r].begin(), rows[r].end(), t.row(r).begin());
    }
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(rows(), 1);
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols(), cols()};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  /// Copy of the listed rows, in order.
  Tensor gather_rows(std::span<const std::size_t> idx) const {
    Tensor out = matrix(idx.size(), cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
  }
  std::string shape_string() const { return shape_string(shape_); }

 private:
  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                a.shape_string());
  }
}

// ---- plain vector helpers -------------------------------------------------

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// C = A * B^T when `b_transposed`, else C = A * B.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool b_transposed = false) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t kb = b_transposed ? b.cols() : b.rows();
  const std::size_t n = b_transposed ? b.rows() : b.cols();
  if (k != kb) {
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_string() +
                                " x " + b.shape_string() +
                                (b_transposed ? "^T" : ""));
  }
  Tensor c = Tensor::matrix(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  if (b_transposed) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
        C[i * n + j] = s;
      }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  return c;
}

/// C = A^T * B.
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_string() +
                                "^T x " + b.shape_string());
  }
  const std::size_t m = a.cols(), r = a.rows(), n = b.cols();
  Tensor c = Tensor::matrix(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t p = 0; p < r; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      const double api = A[p * m + i];
      if (api == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  return c;
}

}  // namespace laat
