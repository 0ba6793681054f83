#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "irrm/tensor.hpp"

namespace irrm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter, in parameter order.
template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update of `params` from their accumulated grads.
/// A parameter without a gradient is treated as having a zero gradient.
/// Non-finite gradients abort the step before anything is modified.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamConfig& cfg = {}) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (T g : params[p].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(p) +
                           " at step " + std::to_string(state.step + 1));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T step_lr = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.eps);

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != params[p].numel()) throw ShapeError("adam_step: moment size mismatch");
    auto value = params[p].mutable_data();
    auto grad = params[p].grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T g = grad.empty() ? T(0) : grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      value[i] -= step_lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// L2 norm over the gradients of all parameters.
template <class T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace irrm
