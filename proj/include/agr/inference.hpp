#pragma once

// Batched scoring of windows that share everything but their final token.
//
// Each row b has a prefix of `prefix_len` tokens followed by one of
// `queries_per_row` alternative last tokens. The prefix is run once, its
// keys/values are cached per layer, and every alternative is then evaluated
// at position `prefix_len` against that cache. Under a causal mask this is
// the same computation as running each full window separately.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "agr/kernels.hpp"
#include "agr/model.hpp"

namespace agr {

namespace detail {

template <typename T>
void linear_rows(const Tensor<T>& w, const Tensor<T>& b, const T* x, std::size_t rows, T* y) {
  const std::size_t in = w.dim(0);
  const std::size_t out = w.dim(1);
  kernels::gemm<T>(false, false, rows, out, in, x, in, w.data().data(), out, y, out, false);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < out; ++j) y[r * out + j] += b[j];
  }
}

}  // namespace detail

/// Returns logits [batch * queries_per_row, vocab] for the last position.
/// `prefixes` is [batch, prefix_len]; `queries` is [batch, queries_per_row].
template <typename T>
Tensor<T> last_position_logits(const TransformerParams<T>& p, std::span<const TokenId> prefixes,
                               std::size_t batch, std::size_t prefix_len, std::span<const TokenId> queries,
                               std::size_t queries_per_row) {
  const ModelConfig& c = p.config;
  const std::size_t d = c.emb_dim;
  const std::size_t nq = queries_per_row;
  check_token_ids(c, prefixes, batch, prefix_len);
  check_token_ids(c, queries, batch, nq);
  if (prefix_len + 1 > c.block_size) {
    throw Error("last_position_logits: window of " + std::to_string(prefix_len + 1) + " tokens exceeds block_size " +
                std::to_string(c.block_size));
  }
  const std::size_t np = batch * prefix_len;  // prefix rows
  const std::size_t nr = batch * nq;          // query rows
  const std::size_t hd = d / c.n_head;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  AlignedVector<T> x(np * d), xq(nr * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < prefix_len; ++i) {
      auto tok = p.wte().row(static_cast<std::size_t>(prefixes[b * prefix_len + i]));
      auto pos = p.wpe().row(i);
      T* dst = x.data() + (b * prefix_len + i) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = tok[j] + pos[j];
    }
    for (std::size_t i = 0; i < nq; ++i) {
      auto tok = p.wte().row(static_cast<std::size_t>(queries[b * nq + i]));
      auto pos = p.wpe().row(prefix_len);
      T* dst = xq.data() + (b * nq + i) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = tok[j] + pos[j];
    }
  }

  AlignedVector<T> h(np * d), hq(nr * d);
  AlignedVector<T> q(np * d), k(np * d), v(np * d), a(np * d);
  AlignedVector<T> qq(nr * d), kq(nr * d), vq(nr * d), aq(nr * d);
  AlignedVector<T> probs(batch * c.n_head * prefix_len * prefix_len);
  AlignedVector<T> scores(nq * (prefix_len + 1));
  AlignedVector<T> mlp(np * 4 * d), mlpq(nr * 4 * d);
  AlignedVector<T> tmp(np * d), tmpq(nr * d);

  auto residual = [](AlignedVector<T>& dst, const AlignedVector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };

  for (std::size_t l = 0; l < c.n_layer; ++l) {
    auto w = [&](LayerSlot s) -> const Tensor<T>& { return p.layer(l, s); };
    kernels::layer_norm_forward<T>(x.data(), w(LayerSlot::kLn1Gamma).data().data(),
                                   w(LayerSlot::kLn1Beta).data().data(), h.data(), nullptr, nullptr, np, d, T(1e-5));
    kernels::layer_norm_forward<T>(xq.data(), w(LayerSlot::kLn1Gamma).data().data(),
                                   w(LayerSlot::kLn1Beta).data().data(), hq.data(), nullptr, nullptr, nr, d,
                                   T(1e-5));
    detail::linear_rows(w(LayerSlot::kWq), w(LayerSlot::kBq), h.data(), np, q.data());
    detail::linear_rows(w(LayerSlot::kWk), w(LayerSlot::kBk), h.data(), np, k.data());
    detail::linear_rows(w(LayerSlot::kWv), w(LayerSlot::kBv), h.data(), np, v.data());
    detail::linear_rows(w(LayerSlot::kWq), w(LayerSlot::kBq), hq.data(), nr, qq.data());
    detail::linear_rows(w(LayerSlot::kWk), w(LayerSlot::kBk), hq.data(), nr, kq.data());
    detail::linear_rows(w(LayerSlot::kWv), w(LayerSlot::kBv), hq.data(), nr, vq.data());

    if (prefix_len > 0) {
      kernels::attention_forward<T>(q.data(), k.data(), v.data(), a.data(), probs.data(),
                                    kernels::AttentionDims{batch, prefix_len, d, c.n_head}, true);
    }
    // Each query attends to its row's cached prefix keys plus its own key.
    const std::size_t width = prefix_len + 1;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hh = 0; hh < c.n_head; ++hh) {
        const T* qb = qq.data() + b * nq * d + hh * hd;
        const T* kb = k.data() + b * prefix_len * d + hh * hd;
        const T* vb = v.data() + b * prefix_len * d + hh * hd;
        kernels::gemm<T>(false, true, nq, prefix_len, hd, qb, d, kb, d, scores.data(), width, false, scale);
        for (std::size_t i = 0; i < nq; ++i) {
          const T* qi = qb + i * d;
          const T* ki = kq.data() + (b * nq + i) * d + hh * hd;
          T dot = 0;
          for (std::size_t j = 0; j < hd; ++j) dot += qi[j] * ki[j];
          std::span<T> row(scores.data() + i * width, width);
          row[prefix_len] = dot * scale;
          kernels::softmax_row<T>(row, row);
        }
        T* out = aq.data() + b * nq * d + hh * hd;
        kernels::gemm<T>(false, false, nq, hd, prefix_len, scores.data(), width, vb, d, out, d, false);
        for (std::size_t i = 0; i < nq; ++i) {
          const T self = scores[i * width + prefix_len];
          const T* vi = vq.data() + (b * nq + i) * d + hh * hd;
          for (std::size_t j = 0; j < hd; ++j) out[i * d + j] += self * vi[j];
        }
      }
    }
    detail::linear_rows(w(LayerSlot::kWo), w(LayerSlot::kBo), a.data(), np, tmp.data());
    detail::linear_rows(w(LayerSlot::kWo), w(LayerSlot::kBo), aq.data(), nr, tmpq.data());
    residual(x, tmp);
    residual(xq, tmpq);

    kernels::layer_norm_forward<T>(x.data(), w(LayerSlot::kLn2Gamma).data().data(),
                                   w(LayerSlot::kLn2Beta).data().data(), h.data(), nullptr, nullptr, np, d, T(1e-5));
    kernels::layer_norm_forward<T>(xq.data(), w(LayerSlot::kLn2Gamma).data().data(),
                                   w(LayerSlot::kLn2Beta).data().data(), hq.data(), nullptr, nullptr, nr, d,
                                   T(1e-5));
    detail::linear_rows(w(LayerSlot::kWfc), w(LayerSlot::kBfc), h.data(), np, mlp.data());
    detail::linear_rows(w(LayerSlot::kWfc), w(LayerSlot::kBfc), hq.data(), nr, mlpq.data());
    for (auto& e : mlp) e = kernels::gelu(e);
    for (auto& e : mlpq) e = kernels::gelu(e);
    detail::linear_rows(w(LayerSlot::kWproj), w(LayerSlot::kBproj), mlp.data(), np, tmp.data());
    detail::linear_rows(w(LayerSlot::kWproj), w(LayerSlot::kBproj), mlpq.data(), nr, tmpq.data());
    residual(x, tmp);
    residual(xq, tmpq);
  }

  kernels::layer_norm_forward<T>(xq.data(), p.ln_f_gamma().data().data(), p.ln_f_beta().data().data(), hq.data(),
                                 nullptr, nullptr, nr, d, T(1e-5));
  Tensor<T> logits({nr, c.vocab_size});
  kernels::gemm<T>(false, true, nr, c.vocab_size, d, hq.data(), d, p.wte().data().data(), d, logits.data().data(),
                   c.vocab_size, false);
  check_finite(logits, "last_position_logits");
  return logits;
}

}  // namespace agr
