#pragma once

// Decoder-only transformer (GPT-2 layout, pre-norm blocks, tied output head).
// The same architecture serves the next-token model and the second-to-last
// refiner; only the training data layout differs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "agr/autograd.hpp"
#include "agr/tensor.hpp"

namespace agr {

struct ModelConfig {
  std::size_t n_layer = 4;
  std::size_t n_head = 4;
  std::size_t emb_dim = 128;
  std::size_t block_size = 64;
  std::size_t vocab_size = 0;
  double dropout = 0.0;

  void validate() const {
    if (n_layer < 1 || n_head < 1 || emb_dim < 1 || block_size < 1 || vocab_size < 1) {
      throw Error("model config: n_layer, n_head, emb_dim, block_size and vocab_size must all be >= 1");
    }
    if (emb_dim % n_head != 0) {
      throw Error("model config: emb_dim " + std::to_string(emb_dim) + " is not divisible by n_head " +
                  std::to_string(n_head));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("model config: dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Exact number of learned scalars. The output head shares the token
/// embedding, so it is not counted twice. n_layer = 0 is accepted and leaves
/// the embeddings plus the final norm.
inline std::uint64_t count_params(const ModelConfig& c) {
  const std::uint64_t d = c.emb_dim;
  const std::uint64_t per_layer = 12 * d * d + 13 * d;
  return c.vocab_size * d + c.block_size * d + c.n_layer * per_layer + 2 * d;
}

// Offsets of the per-layer tensors inside TransformerParams::tensors.
enum class LayerSlot : std::size_t {
  kLn1Gamma,
  kLn1Beta,
  kWq,
  kBq,
  kWk,
  kBk,
  kWv,
  kBv,
  kWo,
  kBo,
  kLn2Gamma,
  kLn2Beta,
  kWfc,
  kBfc,
  kWproj,
  kBproj,
  kCount,
};

inline constexpr std::size_t kTensorsPerLayer = static_cast<std::size_t>(LayerSlot::kCount);

/// Parameter tensors in declared order: wte, wpe, 16 per layer, ln_f gamma/beta.
template <typename T>
struct TransformerParams {
  ModelConfig config;
  std::vector<Tensor<T>> tensors;

  static std::size_t layer_index(std::size_t layer, LayerSlot slot) {
    return 2 + layer * kTensorsPerLayer + static_cast<std::size_t>(slot);
  }

  Tensor<T>& wte() { return tensors[0]; }
  const Tensor<T>& wte() const { return tensors[0]; }
  const Tensor<T>& wpe() const { return tensors[1]; }
  const Tensor<T>& layer(std::size_t l, LayerSlot s) const { return tensors[layer_index(l, s)]; }
  const Tensor<T>& ln_f_gamma() const { return tensors[tensors.size() - 2]; }
  const Tensor<T>& ln_f_beta() const { return tensors[tensors.size() - 1]; }

  std::uint64_t count() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  template <typename U>
  TransformerParams<U> cast() const {
    TransformerParams<U> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  friend bool operator==(const TransformerParams&, const TransformerParams&) = default;
};

inline std::vector<std::string> param_names(const ModelConfig& c) {
  static constexpr const char* kSlots[kTensorsPerLayer] = {
      "ln_1.weight", "ln_1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
      "attn.v.weight", "attn.v.bias", "attn.proj.weight", "attn.proj.bias", "ln_2.weight", "ln_2.bias",
      "mlp.fc.weight", "mlp.fc.bias", "mlp.proj.weight", "mlp.proj.bias"};
  std::vector<std::string> names{"wte", "wpe"};
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    for (const char* s : kSlots) names.push_back("h" + std::to_string(l) + "." + s);
  }
  names.emplace_back("ln_f.weight");
  names.emplace_back("ln_f.bias");
  return names;
}

inline std::vector<Shape> param_shapes(const ModelConfig& c) {
  const std::size_t d = c.emb_dim;
  std::vector<Shape> shapes{{c.vocab_size, d}, {c.block_size, d}};
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    // Same order as LayerSlot.
    const Shape layer[kTensorsPerLayer] = {{d},    {d},    {d, d},     {d},     {d, d},     {d}, {d, d}, {d},
                                           {d, d}, {d},    {d},        {d},     {d, 4 * d}, {4 * d}, {4 * d, d}, {d}};
    shapes.insert(shapes.end(), std::begin(layer), std::end(layer));
  }
  shapes.push_back({d});
  shapes.push_back({d});
  return shapes;
}

/// N(0, 0.02) weights, residual projections scaled by 1/sqrt(2 n_layer),
/// zero biases, unit layer-norm gains. Deterministic in the seed.
template <typename T>
TransformerParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerParams<T> p{config, {}};
  std::mt19937_64 rng(seed);
  const double base_std = 0.02;
  const double proj_std = base_std / std::sqrt(2.0 * static_cast<double>(config.n_layer));
  const auto shapes = param_shapes(config);
  for (std::size_t i = 0; i < shapes.size(); ++i) p.tensors.emplace_back(shapes[i]);
  auto normal_fill = [&](Tensor<T>& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data()) x = static_cast<T>(dist(rng));
  };
  normal_fill(p.tensors[0], base_std);
  normal_fill(p.tensors[1], base_std);
  for (std::size_t l = 0; l < config.n_layer; ++l) {
    auto at = [&](LayerSlot s) -> Tensor<T>& { return p.tensors[TransformerParams<T>::layer_index(l, s)]; };
    at(LayerSlot::kLn1Gamma).fill(T(1));
    at(LayerSlot::kLn2Gamma).fill(T(1));
    normal_fill(at(LayerSlot::kWq), base_std);
    normal_fill(at(LayerSlot::kWk), base_std);
    normal_fill(at(LayerSlot::kWv), base_std);
    normal_fill(at(LayerSlot::kWo), proj_std);
    normal_fill(at(LayerSlot::kWfc), base_std);
    normal_fill(at(LayerSlot::kWproj), proj_std);
  }
  p.tensors[p.tensors.size() - 2].fill(T(1));
  return p;
}

/// Logits for every position of every row.
template <typename T>
struct ModelOutput {
  Tensor<T> logits;  // [batch, T, vocab_size]
};

inline void check_token_ids(const ModelConfig& c, std::span<const TokenId> ids, std::size_t batch, std::size_t seq) {
  if (seq > c.block_size) {
    throw Error("forward: sequence length " + std::to_string(seq) + " exceeds block_size " +
                std::to_string(c.block_size));
  }
  if (ids.size() != batch * seq) {
    throw ShapeError("forward: " + std::to_string(ids.size()) + " token ids for a [" + std::to_string(batch) + ", " +
                     std::to_string(seq) + "] batch");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c.vocab_size) {
      throw Error("forward: token id " + std::to_string(ids[i]) + " at row " + std::to_string(i / seq) +
                  ", position " + std::to_string(i % seq) + " is outside the vocabulary of size " +
                  std::to_string(c.vocab_size));
    }
  }
}

/// Records the forward pass on `g`, with `vars[i]` the graph leaf of
/// params.tensors[i]. Returns logits [batch, seq, vocab_size].
/// A nonzero dropout_seed enables dropout at config.dropout.
template <typename T>
Var forward(Graph<T>& g, const std::vector<Var>& vars, const ModelConfig& c, std::span<const TokenId> ids,
            std::size_t batch, std::size_t seq, bool causal = true, std::uint64_t dropout_seed = 0) {
  check_token_ids(c, ids, batch, seq);
  const bool use_dropout = dropout_seed != 0 && c.dropout > 0;
  std::uint64_t drop_counter = dropout_seed;
  auto drop = [&](Var x) { return use_dropout ? g.dropout(x, static_cast<T>(c.dropout), ++drop_counter) : x; };
  auto at = [&](std::size_t l, LayerSlot s) { return vars[TransformerParams<T>::layer_index(l, s)]; };

  std::vector<TokenId> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = static_cast<TokenId>(i);
  Var x = g.add(g.embedding_lookup(vars[0], ids, {batch, seq}), g.embedding_lookup(vars[1], positions, {seq}));
  x = drop(x);
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    Var h = g.layer_norm(x, at(l, LayerSlot::kLn1Gamma), at(l, LayerSlot::kLn1Beta));
    Var q = g.add(g.matmul(h, at(l, LayerSlot::kWq)), at(l, LayerSlot::kBq));
    Var k = g.add(g.matmul(h, at(l, LayerSlot::kWk)), at(l, LayerSlot::kBk));
    Var v = g.add(g.matmul(h, at(l, LayerSlot::kWv)), at(l, LayerSlot::kBv));
    Var a = g.attention(q, k, v, c.n_head, causal);
    x = g.add(x, drop(g.add(g.matmul(a, at(l, LayerSlot::kWo)), at(l, LayerSlot::kBo))));
    Var h2 = g.layer_norm(x, at(l, LayerSlot::kLn2Gamma), at(l, LayerSlot::kLn2Beta));
    Var m = g.gelu(g.add(g.matmul(h2, at(l, LayerSlot::kWfc)), at(l, LayerSlot::kBfc)));
    x = g.add(x, drop(g.add(g.matmul(m, at(l, LayerSlot::kWproj)), at(l, LayerSlot::kBproj))));
  }
  x = g.layer_norm(x, vars[vars.size() - 2], vars[vars.size() - 1]);
  return g.matmul(x, vars[0], /*transpose_b=*/true);
}

/// Adds every parameter tensor to `g` as a leaf.
template <typename T>
std::vector<Var> add_param_leaves(Graph<T>& g, const TransformerParams<T>& p, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(p.tensors.size());
  for (const auto& t : p.tensors) vars.push_back(g.leaf(t, requires_grad));
  return vars;
}

/// Inference-only forward pass over a [batch, seq] block of token ids.
template <typename T>
ModelOutput<T> forward(const TransformerParams<T>& p, std::span<const TokenId> ids, std::size_t batch,
                       std::size_t seq, bool causal = true) {
  Graph<T> g;
  auto vars = add_param_leaves(g, p, false);
  Var logits = forward(g, vars, p.config, ids, batch, seq, causal);
  return ModelOutput<T>{g.value(logits)};
}

}  // namespace agr
