#pragma once

#include <functional>

#include "space/common.hpp"

namespace space {

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
// The loss is evaluated in double; use step ~1e-3.
inline double finite_diff_check(const std::function<double(const Vecd&)>& loss, Vecd params,
                                const Vecd& analytic, double step) {
  require(params.size() == analytic.size(), "finite_diff_check: size mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double saved = params(i);
    params(i) = saved + step;
    const double up = loss(params);
    params(i) = saved - step;
    const double down = loss(params);
    params(i) = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic(i) - numeric) / (std::abs(analytic(i)) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace space
