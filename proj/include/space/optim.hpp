#pragma once

#include <cstdint>
#include <vector>

#include "space/common.hpp"

namespace space {

// Adam with bias correction. Moment buffers are laid out to match the
// parameter list given at construction; the same list order must be used on
// every step.
template <class S>
class AdamState {
 public:
  AdamState(const std::vector<const MatX<S>*>& params, double lr, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const MatX<S>* p : params) {
      m_.push_back(MatX<S>::Zero(p->rows(), p->cols()));
      v_.push_back(MatX<S>::Zero(p->rows(), p->cols()));
    }
  }

  // Applies one update in place. If any gradient is non-finite the whole step
  // is skipped and false is returned; the step counter does not advance.
  bool step(const std::vector<MatX<S>*>& params, const std::vector<const MatX<S>*>& grads) {
    require(params.size() == m_.size() && grads.size() == m_.size(),
            "adam_step: parameter list does not match state");
    for (size_t k = 0; k < params.size(); ++k) {
      require(params[k]->rows() == m_[k].rows() && params[k]->cols() == m_[k].cols(),
              "adam_step: parameter shape changed");
      require(grads[k]->rows() == m_[k].rows() && grads[k]->cols() == m_[k].cols(),
              "adam_step: gradient shape mismatch");
      if (!all_finite(*grads[k])) {
        ++skipped_;
        return false;
      }
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (size_t k = 0; k < params.size(); ++k) {
      MatX<S>& m = m_[k];
      MatX<S>& v = v_[k];
      const MatX<S>& g = *grads[k];
      MatX<S>& p = *params[k];
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g.data()[i]);
        const double mi = beta1_ * static_cast<double>(m.data()[i]) + (1.0 - beta1_) * gi;
        const double vi = beta2_ * static_cast<double>(v.data()[i]) + (1.0 - beta2_) * gi * gi;
        m.data()[i] = static_cast<S>(mi);
        v.data()[i] = static_cast<S>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p.data()[i] -= static_cast<S>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
    return true;
  }

  int64_t step_count() const { return step_count_; }
  int64_t skipped_steps() const { return skipped_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  const MatX<S>& second_moment(size_t k) const { return v_[k]; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t step_count_ = 0;
  int64_t skipped_ = 0;
  std::vector<MatX<S>> m_, v_;
};

}  // namespace space
