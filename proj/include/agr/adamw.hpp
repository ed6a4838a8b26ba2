#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "agr/tensor.hpp"

namespace agr {

template <typename T>
struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Applied to parameters of rank >= 2 (weight matrices and embeddings).
  double weight_decay = 0.1;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
};

/// One decoupled-weight-decay Adam update with bias correction.
/// `names`, when given, labels parameters in error messages.
template <typename T>
void adamw_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamWState<T>& state, double lr,
                std::span<const std::string> names = {}) {
  if (params.size() != grads.size()) {
    throw Error("adamw_step: " + std::to_string(params.size()) + " parameters but " + std::to_string(grads.size()) +
                " gradients");
  }
  if (!(lr >= 0)) throw Error("adamw_step: learning rate must be non-negative");
  auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ShapeError("adamw_step: parameter " + label(i) + " has shape " + shape_str(params[i].shape()) +
                       " but its gradient has shape " + shape_str(grads[i].shape()));
    }
    if (!grads[i].all_finite()) throw NonFiniteError("adamw_step: non-finite gradient for parameter " + label(i));
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  }
  if (state.first_moment.size() != params.size()) throw Error("adamw_step: optimizer state does not match parameters");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(state.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    const T decay = params[i].rank() >= 2 ? static_cast<T>(1.0 - lr * state.weight_decay) : T(1);
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) {
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto& g : grads) {
      for (auto& x : g.data()) x *= s;
    }
  }
  return norm;
}

}  // namespace agr
