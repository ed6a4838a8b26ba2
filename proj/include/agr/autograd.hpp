#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "agr/kernels.hpp"
#include "agr/tensor.hpp"

namespace agr {

enum class Primitive {
  kLeaf,
  kMatMul,
  kAdd,
  kScale,
  kGelu,
  kSoftmaxLastDim,
  kLayerNorm,
  kEmbeddingLookup,
  kCrossEntropyMasked,
  kAttention,
  kSum,
  kDropout,
};

inline std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kMatMul: return "matmul";
    case Primitive::kAdd: return "add";
    case Primitive::kScale: return "scale";
    case Primitive::kGelu: return "gelu";
    case Primitive::kSoftmaxLastDim: return "softmax_last_dim";
    case Primitive::kLayerNorm: return "layer_norm";
    case Primitive::kEmbeddingLookup: return "embedding_lookup";
    case Primitive::kCrossEntropyMasked: return "cross_entropy_masked";
    case Primitive::kAttention: return "attention";
    case Primitive::kSum: return "sum";
    case Primitive::kDropout: return "dropout";
  }
  return "unknown";
}

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

namespace detail {
inline std::atomic<std::uint64_t>& loss_position_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
}  // namespace detail

/// Total number of token positions that have entered a cross-entropy loss
/// since process start (or the last reset).
inline std::uint64_t loss_positions_evaluated() { return detail::loss_position_counter().load(); }
inline void reset_loss_position_counter() { detail::loss_position_counter().store(0); }

/// Tape of primitive applications for reverse-mode differentiation. Nodes are
/// appended in evaluation order, so the tape is a topological order.
/// Single-threaded; build one graph per step.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(Primitive::kLeaf, {}, std::move(value), requires_grad, nullptr);
  }

  /// a[..., K] x b[K, N] -> [..., N]; with transpose_b, b is [N, K].
  Var matmul(Var a, Var b, bool transpose_b = false) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() < 1 || bv.rank() != 2) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
    const std::size_t k = av.last_dim();
    const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
    if ((transpose_b ? bv.dim(1) : bv.dim(0)) != k) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                       (transpose_b ? " (b transposed)" : ""));
    }
    const std::size_t m = av.rows();
    Shape out_shape = av.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    kernels::gemm<T>(false, transpose_b, m, n, k, av.data().data(), k, bv.data().data(), transpose_b ? k : n,
                     out.data().data(), n, false);
    return push(Primitive::kMatMul, {a.id, b.id}, std::move(out), any_grad({a, b}),
                [=](Graph& g, std::size_t self) {
                  const Tensor<T>& dc = g.nodes_[self].grad;
                  const Tensor<T>& A = g.nodes_[a.id].value;
                  const Tensor<T>& B = g.nodes_[b.id].value;
                  if (g.nodes_[a.id].requires_grad) {
                    // dA = dC * op(B)^T
                    kernels::gemm<T>(false, !transpose_b, m, k, n, dc.data().data(), n, B.data().data(),
                                     transpose_b ? k : n, g.grad_ref(a.id).data().data(), k, true);
                  }
                  if (g.nodes_[b.id].requires_grad) {
                    if (transpose_b) {
                      // dB[N,K] = dC^T * A
                      kernels::gemm<T>(true, false, n, k, m, dc.data().data(), n, A.data().data(), k,
                                       g.grad_ref(b.id).data().data(), k, true);
                    } else {
                      kernels::gemm<T>(true, false, k, n, m, A.data().data(), k, dc.data().data(), n,
                                       g.grad_ref(b.id).data().data(), n, true);
                    }
                  }
                });
  }

  /// Elementwise a + b where b's shape equals a trailing suffix of a's shape
  /// (b is repeated over the leading axes).
  Var add(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    const Shape& as = av.shape();
    const Shape& bs = bv.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
      throw ShapeError("add: shape " + shape_str(bs) + " does not broadcast onto " + shape_str(as));
    }
    const std::size_t inner = bv.numel();
    const std::size_t outer = inner == 0 ? 0 : av.numel() / inner;
    Tensor<T> out = av;
    {
      T* od = out.data().data();
      const T* bd = bv.data().data();
      for (std::size_t o = 0; o < outer; ++o, od += inner) {
        for (std::size_t i = 0; i < inner; ++i) od[i] += bd[i];
      }
    }
    return push(Primitive::kAdd, {a.id, b.id}, std::move(out), any_grad({a, b}), [=](Graph& g, std::size_t self) {
      const T* dc = g.nodes_[self].grad.data().data();
      if (g.nodes_[a.id].requires_grad) {
        T* da = g.grad_ref(a.id).data().data();
        for (std::size_t i = 0; i < outer * inner; ++i) da[i] += dc[i];
      }
      if (g.nodes_[b.id].requires_grad) {
        T* db = g.grad_ref(b.id).data().data();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* row = dc + o * inner;
          for (std::size_t i = 0; i < inner; ++i) db[i] += row[i];
        }
      }
    });
  }

  Var scale(Var a, T factor) {
    Tensor<T> out = value(a);
    for (auto& v : out.data()) v *= factor;
    return push(Primitive::kScale, {a.id}, std::move(out), any_grad({a}), [=](Graph& g, std::size_t self) {
      auto dc = g.nodes_[self].grad.data();
      auto da = g.grad_ref(a.id).data();
      for (std::size_t i = 0; i < dc.size(); ++i) da[i] += factor * dc[i];
    });
  }

  Var gelu(Var a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.shape());
    kernels::gelu_array(av.data().data(), out.data().data(), av.numel());
    return push(Primitive::kGelu, {a.id}, std::move(out), any_grad({a}), [=](Graph& g, std::size_t self) {
      const Tensor<T>& dc = g.nodes_[self].grad;
      kernels::gelu_backward_array(g.nodes_[a.id].value.data().data(), dc.data().data(),
                                   g.grad_ref(a.id).data().data(), dc.numel());
    });
  }

  Var softmax_last_dim(Var a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.shape());
    for (std::size_t r = 0; r < av.rows(); ++r) kernels::softmax_row<T>(av.row(r), out.row(r));
    return push(Primitive::kSoftmaxLastDim, {a.id}, std::move(out), any_grad({a}), [=](Graph& g, std::size_t self) {
      const Tensor<T>& y = g.nodes_[self].value;
      const Tensor<T>& dy = g.nodes_[self].grad;
      Tensor<T>& da = g.grad_ref(a.id);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto dyr = dy.row(r);
        auto dar = da.row(r);
        T dot = 0;
        for (std::size_t i = 0; i < yr.size(); ++i) dot += yr[i] * dyr[i];
        for (std::size_t i = 0; i < yr.size(); ++i) dar[i] += yr[i] * (dyr[i] - dot);
      }
    });
  }

  /// Normalizes the trailing axis, then applies gamma * xhat + beta.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) { return layer_norm_impl(x, gamma, beta, eps); }

  /// Normalization without the affine part.
  Var layer_norm(Var x, T eps = T(1e-5)) { return layer_norm_impl(x, Var{}, Var{}, eps); }

  /// Gathers rows of table [V, D]; output shape is ids_shape + [D].
  Var embedding_lookup(Var table, std::span<const TokenId> ids, Shape ids_shape) {
    const Tensor<T>& tv = value(table);
    if (tv.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(tv.shape()));
    if (shape_numel(ids_shape) != ids.size()) {
      throw ShapeError("embedding_lookup: " + std::to_string(ids.size()) + " ids for shape " + shape_str(ids_shape));
    }
    const std::size_t rows = tv.dim(0);
    const std::size_t width = tv.dim(1);
    Shape out_shape = ids_shape;
    out_shape.push_back(width);
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
        throw Error("embedding_lookup: token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                    " is outside [0, " + std::to_string(rows) + ")");
      }
      auto src = tv.row(static_cast<std::size_t>(ids[i]));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<TokenId> saved(ids.begin(), ids.end());
    return push(Primitive::kEmbeddingLookup, {table.id}, std::move(out), any_grad({table}),
                [=, saved = std::move(saved)](Graph& g, std::size_t self) {
                  const Tensor<T>& dy = g.nodes_[self].grad;
                  Tensor<T>& dt = g.grad_ref(table.id);
                  for (std::size_t i = 0; i < saved.size(); ++i) {
                    auto src = dy.row(i);
                    auto dst = dt.row(static_cast<std::size_t>(saved[i]));
                    for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                  }
                });
  }

  /// Mean negative log-likelihood over rows of logits [..., V] whose mask
  /// entry is nonzero. Unmasked rows are never read.
  Var cross_entropy_masked(Var logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
    const Tensor<T>& lv = value(logits);
    const std::size_t n = lv.rows();
    const std::size_t vocab = lv.last_dim();
    if (targets.size() != n || mask.size() != n) {
      throw ShapeError("cross_entropy_masked: logits " + shape_str(lv.shape()) + " need " + std::to_string(n) +
                       " targets and mask entries, got " + std::to_string(targets.size()) + " and " +
                       std::to_string(mask.size()));
    }
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
        throw Error("cross_entropy_masked: target " + std::to_string(targets[i]) + " at position " +
                    std::to_string(i) + " is outside [0, " + std::to_string(vocab) + ")");
      }
      rows.push_back(i);
    }
    if (rows.empty()) throw Error("cross_entropy_masked: loss mask has no true entries");
    detail::loss_position_counter().fetch_add(rows.size());
    double total = 0;
    for (std::size_t r : rows) {
      auto row = lv.row(r);
      total += static_cast<double>(kernels::log_sum_exp<T>(row) - row[static_cast<std::size_t>(targets[r])]);
    }
    const double count = static_cast<double>(rows.size());
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / count));
    std::vector<TokenId> saved_targets(targets.begin(), targets.end());
    return push(Primitive::kCrossEntropyMasked, {logits.id}, std::move(out), any_grad({logits}),
                [=, rows = std::move(rows), saved_targets = std::move(saved_targets)](Graph& g, std::size_t self) {
                  const T scale = g.nodes_[self].grad.item() / static_cast<T>(count);
                  const Tensor<T>& L = g.nodes_[logits.id].value;
                  Tensor<T>& dl = g.grad_ref(logits.id);
                  AlignedVector<T> p(vocab);
                  for (std::size_t r : rows) {
                    kernels::softmax_row<T>(L.row(r), p);
                    p[static_cast<std::size_t>(saved_targets[r])] -= T(1);
                    auto dr = dl.row(r);
                    for (std::size_t j = 0; j < vocab; ++j) dr[j] += scale * p[j];
                  }
                });
  }

  /// Multi-head scaled dot-product attention over q, k, v of shape [B, T, C].
  Var attention(Var q, Var k, Var v, std::size_t n_head, bool causal = true) {
    const Tensor<T>& qv = value(q);
    if (qv.rank() != 3 || value(k).shape() != qv.shape() || value(v).shape() != qv.shape()) {
      throw ShapeError("attention: q, k, v must share one [B, T, C] shape, got " + shape_str(qv.shape()) + ", " +
                       shape_str(value(k).shape()) + ", " + shape_str(value(v).shape()));
    }
    if (n_head == 0 || qv.dim(2) % n_head != 0) {
      throw ShapeError("attention: " + std::to_string(qv.dim(2)) + " channels not divisible into " +
                       std::to_string(n_head) + " heads");
    }
    const kernels::AttentionDims dims{qv.dim(0), qv.dim(1), qv.dim(2), n_head};
    Tensor<T> out(qv.shape());
    auto probs = std::make_shared<AlignedVector<T>>(dims.batch * n_head * dims.seq * dims.seq);
    kernels::attention_forward<T>(qv.data().data(), value(k).data().data(), value(v).data().data(),
                                  out.data().data(), probs->data(), dims, causal);
    return push(Primitive::kAttention, {q.id, k.id, v.id}, std::move(out), any_grad({q, k, v}),
                [=](Graph& g, std::size_t self) {
                  auto ptr = [&](Var x) -> T* {
                    return g.nodes_[x.id].requires_grad ? g.grad_ref(x.id).data().data() : nullptr;
                  };
                  kernels::attention_backward<T>(g.nodes_[q.id].value.data().data(),
                                                 g.nodes_[k.id].value.data().data(),
                                                 g.nodes_[v.id].value.data().data(), probs->data(),
                                                 g.nodes_[self].grad.data().data(), ptr(q), ptr(k), ptr(v), dims);
                });
  }

  Var sum(Var a) {
    T total = 0;
    for (T x : value(a).data()) total += x;
    return push(Primitive::kSum, {a.id}, Tensor<T>::scalar(total), any_grad({a}), [=](Graph& g, std::size_t self) {
      const T d = g.nodes_[self].grad.item();
      for (auto& x : g.grad_ref(a.id).data()) x += d;
    });
  }

  /// Inverted dropout with keep-probability 1 - p; identity when p == 0.
  Var dropout(Var a, T p, std::uint64_t seed) {
    if (p < 0 || p >= 1) throw Error("dropout: probability must lie in [0, 1)");
    Tensor<T> out = value(a);
    AlignedVector<T> keep(out.numel(), T(1));
    if (p > 0) {
      std::mt19937_64 rng(seed);
      std::bernoulli_distribution drop(static_cast<double>(p));
      const T s = T(1) / (T(1) - p);
      for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = drop(rng) ? T(0) : s;
      for (std::size_t i = 0; i < keep.size(); ++i) out[i] *= keep[i];
    }
    return push(Primitive::kDropout, {a.id}, std::move(out), any_grad({a}),
                [=, keep = std::move(keep)](Graph& g, std::size_t self) {
                  auto dc = g.nodes_[self].grad.data();
                  auto da = g.grad_ref(a.id).data();
                  for (std::size_t i = 0; i < dc.size(); ++i) da[i] += keep[i] * dc[i];
                });
  }

  /// Fills the gradient of every requires_grad node with d(loss)/d(node).
  /// Gradients from a previous call are discarded.
  void backward(Var loss) {
    const Tensor<T>& lv = value(loss);
    if (lv.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    for (auto& node : nodes_) node.grad = node.requires_grad ? Tensor<T>(node.value.shape()) : Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad.fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.requires_grad && node.backward) node.backward(*this, i);
    }
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  /// Gradient after backward(); zeros of the value's shape if none flowed.
  const Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  Primitive kind(Var v) const { return node(v).kind; }
  const std::vector<std::size_t>& inputs(Var v) const { return node(v).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Primitive kind;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Graph&, std::size_t)> backward;
  };

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw Error("graph: invalid variable handle");
    return nodes_[v.id];
  }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars) {
      if (v.valid() && node(v).requires_grad) return true;
    }
    return false;
  }

  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  Var push(Primitive kind, std::vector<std::size_t> inputs, Tensor<T> value, bool requires_grad,
           std::function<void(Graph&, std::size_t)> backward) {
    if (kind != Primitive::kLeaf) check_finite(value, primitive_name(kind));
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), Tensor<T>(), requires_grad,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{nodes_.size() - 1};
  }

  Var layer_norm_impl(Var x, Var gamma, Var beta, T eps) {
    const Tensor<T>& xv = value(x);
    const std::size_t width = xv.last_dim();
    const std::size_t rows = xv.rows();
    const bool affine = gamma.valid();
    if (affine && (value(gamma).shape() != Shape{width} || value(beta).shape() != Shape{width})) {
      throw ShapeError("layer_norm: gamma/beta shapes " + shape_str(value(gamma).shape()) + ", " +
                       shape_str(value(beta).shape()) + " do not match trailing axis of " + shape_str(xv.shape()));
    }
    Tensor<T> out(xv.shape());
    auto stats = std::make_shared<AlignedVector<T>>(2 * rows);
    kernels::layer_norm_forward<T>(xv.data().data(), affine ? value(gamma).data().data() : nullptr,
                                   affine ? value(beta).data().data() : nullptr, out.data().data(), stats->data(),
                                   stats->data() + rows, rows, width, eps);
    std::vector<std::size_t> ins{x.id};
    if (affine) {
      ins.push_back(gamma.id);
      ins.push_back(beta.id);
    }
    const bool rg = affine ? any_grad({x, gamma, beta}) : any_grad({x});
    return push(Primitive::kLayerNorm, std::move(ins), std::move(out), rg, [=](Graph& g, std::size_t self) {
      AlignedVector<T> ones;
      const T* gptr = nullptr;
      if (affine) {
        gptr = g.nodes_[gamma.id].value.data().data();
      } else {
        ones.assign(width, T(1));
        gptr = ones.data();
      }
      T* dx = g.nodes_[x.id].requires_grad ? g.grad_ref(x.id).data().data() : nullptr;
      T* dg = affine && g.nodes_[gamma.id].requires_grad ? g.grad_ref(gamma.id).data().data() : nullptr;
      T* db = affine && g.nodes_[beta.id].requires_grad ? g.grad_ref(beta.id).data().data() : nullptr;
      kernels::layer_norm_backward<T>(g.nodes_[x.id].value.data().data(), gptr, stats->data(), stats->data() + rows,
                                      g.nodes_[self].grad.data().data(), dx, dg, db, rows, width);
    });
  }

  std::vector<Node> nodes_;
};

}  // namespace agr
