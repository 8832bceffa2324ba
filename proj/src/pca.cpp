#include "space/pca.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace space {

EigenSym jacobi_eigen_sym(Matd a, int max_sweeps, double tol) {
  require(a.rows() == a.cols(), "jacobi_eigen_sym: matrix must be square");
  const Eigen::Index n = a.rows();
  Matd v = Matd::Identity(n, n);
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= tol * scale) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= tol * scale * 1e-3) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double aip = a(i, p), aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double api = a(p, i), aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });
  EigenSym out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values(k) = a(order[static_cast<size_t>(k)], order[static_cast<size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<size_t>(k)]);
    // fix an arbitrary overall sign so results are reproducible
    Eigen::Index imax = 0;
    out.vectors.col(k).cwiseAbs().maxCoeff(&imax);
    if (out.vectors(imax, k) < 0) out.vectors.col(k) = -out.vectors.col(k);
  }
  return out;
}

template <class S>
PcaResult<S> pca_project(const MatX<S>& points, Eigen::Index k) {
  const Eigen::Index n = points.rows();
  const Eigen::Index d = points.cols();
  require(n >= 2, "pca_project: need at least 2 points");
  require(k >= 1 && k <= d, "pca_project: k must be in [1, d]");

  Matd x = points.template cast<double>();
  const Matd mean = x.colwise().mean();
  x.rowwise() -= mean.row(0);
  Matd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  EigenSym es = jacobi_eigen_sym(std::move(cov));
  double total = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) total += std::max(0.0, es.values(i));

  PcaResult<S> r;
  r.components.resize(k, d);
  r.variance.resize(k);
  r.explained_ratio.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    r.components.row(i) = es.vectors.col(i).transpose().template cast<S>();
    const double lam = std::max(0.0, es.values(i));
    r.variance(i) = static_cast<S>(lam);
    r.explained_ratio(i) = static_cast<S>(total > 0 ? lam / total : 0.0);
  }
  r.projected = ((x)*es.vectors.leftCols(k)).template cast<S>();
  return r;
}

template PcaResult<float> pca_project<float>(const MatX<float>&, Eigen::Index);
template PcaResult<double> pca_project<double>(const MatX<double>&, Eigen::Index);

}  // namespace space
