#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace space {

// Dense row-major matrices; row-major so per-row slices (token positions,
// head segments) are contiguous and serialize in file order.
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matf = MatX<float>;
using Matd = MatX<double>;
using Vecf = VecX<float>;
using Vecd = VecX<double>;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Reductions accumulate in double regardless of storage scalar.
template <class Derived>
double sum64(const Eigen::MatrixBase<Derived>& m) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) acc += static_cast<double>(m(i, j));
  return acc;
}

template <class Derived>
double mean64(const Eigen::MatrixBase<Derived>& m) {
  return m.size() == 0 ? 0.0 : sum64(m) / static_cast<double>(m.size());
}

template <class Derived, class Derived2>
double dot64(const Eigen::MatrixBase<Derived>& a, const Eigen::MatrixBase<Derived2>& b) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a(i)) * static_cast<double>(b(i));
  return acc;
}

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(static_cast<double>(m(i, j)))) return false;
  return true;
}

}  // namespace space
