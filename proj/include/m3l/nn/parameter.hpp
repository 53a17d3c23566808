#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

#include "m3l/core/rng.hpp"

namespace m3l::nn {

using Index = Eigen::Index;

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// A learnable tensor and its accumulated gradient (same shape).
template <typename S>
struct Parameter {
  Matrix<S> value;
  Matrix<S> grad;

  Parameter() = default;
  Parameter(Index rows, Index cols)
      : value(Matrix<S>::Zero(rows, cols)), grad(Matrix<S>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

template <typename S>
struct NamedParameter {
  std::string name;
  Parameter<S>* param;
};

template <typename S>
using ParameterList = std::vector<NamedParameter<S>>;

/// Callback signature used by every module's visit(): (qualified name, parameter).
template <typename S>
using Visitor = std::function<void(const std::string&, Parameter<S>&)>;

/// Flattens a module tree into a list, in the module's fixed visitation order.
template <typename S, typename Module>
ParameterList<S> collect_parameters(Module& module, const std::string& prefix = "") {
  ParameterList<S> out;
  module.visit([&](const std::string& name, Parameter<S>& p) { out.push_back({name, &p}); },
               prefix);
  return out;
}

template <typename S>
void zero_grads(const ParameterList<S>& params) {
  for (auto& np : params) np.param->zero_grad();
}

template <typename S>
Index parameter_count(const ParameterList<S>& params) {
  Index n = 0;
  for (const auto& np : params) n += np.param->size();
  return n;
}

/// Truncated normal (2 sigma) weight initialisation.
template <typename S>
void init_truncated_normal(Parameter<S>& p, Rng& rng, double std) {
  for (Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<S>(rng.truncated_normal(std, 2.0 * std));
  }
  p.zero_grad();
}

}  // namespace m3l::nn
