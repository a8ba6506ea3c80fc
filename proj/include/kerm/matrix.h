#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace kerm {

// Dense row-major matrix of doubles. A value type: copies are deep.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  // Matrix::from({{1, 2}, {3, 4}}) for tests and fixtures.
  static Matrix from(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::string shape_string() const;
  bool same_shape(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// When enabled (the default) every public operation checks its result for
// NaN/Inf and throws InvariantError on the first non-finite value.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void check_finite(const Matrix& m, const char* where);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
// x W + b, b broadcast over rows. b is 1 x W.cols().
Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b);
// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& x);

double dot(std::span<const double> a, std::span<const double> b);

enum class Activation { kIdentity, kGelu, kSigmoid, kTanh };

double activate(Activation act, double x);
double activate_derivative(Activation act, double x);
const char* activation_name(Activation act);
Activation activation_from_name(const std::string& name);

// Named parameters with matching gradient accumulators. Names iterate in
// lexicographic order, which fixes every reduction order that walks the
// store (optimizer steps, checkpoints, gradient checks).
class ParamStore {
 public:
  void add(const std::string& name, Matrix init);
  bool contains(const std::string& name) const;
  Matrix& value(const std::string& name);
  const Matrix& value(const std::string& name) const;
  Matrix& grad(const std::string& name);
  const Matrix& grad(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  void zero_grad();

  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);
  void write(std::ostream& out) const;
  static ParamStore read(std::istream& in);

  bool operator==(const ParamStore& o) const;

 private:
  struct Entry {
    Matrix value;
    Matrix grad;
  };
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);
  std::map<std::string, Entry> entries_;
};

}  // namespace kerm
