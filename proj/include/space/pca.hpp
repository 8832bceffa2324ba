#pragma once

#include "space/common.hpp"

namespace space {

struct EigenSym {
  Vecd values;   // descending
  Matd vectors;  // column k pairs with values(k)
};

// Cyclic Jacobi rotations on a symmetric matrix. Adequate and exact enough
// for the dimensions used here (d <= 128).
EigenSym jacobi_eigen_sym(Matd a, int max_sweeps = 100, double tol = 1e-14);

template <class S>
struct PcaResult {
  MatX<S> projected;        // n x k
  MatX<S> components;       // k x d, orthonormal rows
  VecX<S> variance;         // per-component, non-increasing
  VecX<S> explained_ratio;  // variance / total variance
};

// Principal components via eigen-decomposition of the sample covariance.
// Degenerate directions get zero variance; k > d is an error.
template <class S>
PcaResult<S> pca_project(const MatX<S>& points, Eigen::Index k);

}  // namespace space
