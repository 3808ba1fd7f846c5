#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace kermit {

// Dense row-major matrix of doubles. A value type: copy freely.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  std::string shape() const;

  // Bitwise element equality (NaN never compares equal).
  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Plain (untaped) kernels. Every output element is accumulated in a fixed
// order that does not depend on the number of rows, so a row computed alone
// is bit-identical to the same row computed inside a larger product.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix softmax_rows(const Matrix& m);
Matrix log_softmax_rows(const Matrix& m);
Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end);
Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end);
Matrix concat_rows(std::span<const Matrix> parts);

void add_inplace(Matrix& dst, const Matrix& src);
void axpy(double alpha, const Matrix& x, Matrix& y);

double max_abs_diff(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);
bool all_finite(const Matrix& m);
std::size_t argmax(std::span<const double> v);
double log_sum_exp(std::span<const double> v);

// Named-array container: per array a header line `name rows cols` followed by
// rows lines of cols whitespace-separated values, arrays sorted by name.
// Values are written in shortest round-trip form, so reading back is exact.
using NamedArrays = std::map<std::string, Matrix>;
void write_named_arrays(std::ostream& out, const NamedArrays& arrays);
NamedArrays read_named_arrays(std::istream& in);
void save_named_arrays(const std::string& path, const NamedArrays& arrays);
NamedArrays load_named_arrays(const std::string& path);

std::string format_double(double v);

}  // namespace kermit
