#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "m3l/nn/parameter.hpp"

namespace m3l::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by position in the parameter list,
/// so callers must pass lists collected in the same visitation order every step.
template <typename S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(const ParameterList<S>& params) {
    if (first_.empty()) {
      for (const auto& np : params) {
        first_.push_back(Matrix<S>::Zero(np.param->value.rows(), np.param->value.cols()));
        second_.push_back(Matrix<S>::Zero(np.param->value.rows(), np.param->value.cols()));
      }
    }
    if (first_.size() != params.size()) throw std::logic_error("adam: parameter list changed size");
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S step = static_cast<S>(cfg_.lr / c1);
    const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i].param;
      first_[i] = b1 * first_[i] + (S{1} - b1) * p.grad;
      second_[i] = b2 * second_[i] + (S{1} - b2) * p.grad.cwiseAbs2();
      if (cfg_.lr == 0.0) continue;
      p.value.array() -= step * first_[i].array() / ((second_[i].array().sqrt() * inv_sqrt_c2) + eps);
    }
  }

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  std::vector<Matrix<S>>& first_moments() { return first_; }
  std::vector<Matrix<S>>& second_moments() { return second_; }
  void set_steps(std::int64_t s) { steps_ = s; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix<S>> first_;
  std::vector<Matrix<S>> second_;
  std::int64_t steps_ = 0;
};

}  // namespace m3l::nn
