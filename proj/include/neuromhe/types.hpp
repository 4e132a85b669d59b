#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace neuromhe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Vector3 = Eigen::Vector3d;
using Vector4 = Eigen::Vector4d;
using Matrix3 = Eigen::Matrix3d;
using Vector6 = Eigen::Matrix<double, 6, 1>;

using VectorSeq = std::vector<Vector>;
using MatrixSeq = std::vector<Matrix>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite or otherwise out-of-domain numeric input.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid weights, options or configuration file content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced inside a linear-algebra kernel.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// The sensitivity recursion hit a singular stage; `stage()` is the window index.
class GradientFailure : public Error {
 public:
  GradientFailure(const std::string& what, int stage) : Error(what), stage_(stage) {}
  int stage() const { return stage_; }

 private:
  int stage_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long row, long column)
      : Error(what + " (row " + std::to_string(row) + ", column " + std::to_string(column) + ")"),
        row_(row),
        column_(column) {}
  long row() const { return row_; }
  long column() const { return column_; }

 private:
  long row_;
  long column_;
};

inline void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
  if (!m.allFinite()) throw DomainError(std::string("non-finite ") + what);
}

}  // namespace neuromhe
