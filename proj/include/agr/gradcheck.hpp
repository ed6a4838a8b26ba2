#pragma once

// Central finite-difference check of the autograd engine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "agr/autograd.hpp"

namespace agr {

struct GradCheckResult {
  std::size_t coordinates = 0;
  double max_rel_error = 0;
};

using LossBuilder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

inline double eval_loss(const std::vector<Tensor<double>>& inputs, const LossBuilder& build) {
  Graph<double> g;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t, false));
  return g.value(build(g, leaves)).item();
}

/// Compares backward() against central differences on `coords` random
/// coordinates drawn across all differentiable inputs. Inputs whose index is
/// in `frozen` are treated as constants.
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& inputs, const LossBuilder& build,
                                  std::size_t coords, std::uint64_t seed, double h = 1e-5,
                                  const std::vector<std::size_t>& frozen = {}) {
  auto is_frozen = [&](std::size_t i) { return std::find(frozen.begin(), frozen.end(), i) != frozen.end(); };
  Graph<double> g;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(g.leaf(inputs[i], !is_frozen(i)));
  Var loss = build(g, leaves);
  g.backward(loss);
  std::vector<Tensor<double>> grads;
  for (Var v : leaves) grads.push_back(g.grad(v));

  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (is_frozen(i)) continue;
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) all.emplace_back(i, j);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > coords) all.resize(coords);

  GradCheckResult result;
  for (auto [i, j] : all) {
    auto plus = inputs;
    auto minus = inputs;
    plus[i][j] += h;
    minus[i][j] -= h;
    const double numeric = (eval_loss(plus, build) - eval_loss(minus, build)) / (2 * h);
    const double analytic = grads[i][j];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(numeric - analytic) / denom);
    ++result.coordinates;
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& x : t.data()) x = n(rng);
  return t;
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight to the loss.
inline Var random_projection_loss(Graph<double>& g, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& v = g.value(out);
  Var r = g.leaf(random_tensor({v.last_dim(), 1}, rng), false);
  return g.sum(g.matmul(out, r));
}

}  // namespace agr
