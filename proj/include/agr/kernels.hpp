#pragma once

// Raw numeric kernels shared by the autograd primitives and the inference
// engine. Everything is row-major; leading dimensions are in elements.

#include <Eigen/Core>

#include "agr/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace agr::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

/// C[m,n] (+)= op(A) * op(B), where op(A) is [m,k] and op(B) is [k,n].
/// With trans_a the stored A is [k,m]; with trans_b the stored B is [n,k].
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate, T alpha = T{1}) {
  using Idx = Eigen::Index;
  if (m == 0 || n == 0) return;
  MatMap<T> cm(c, static_cast<Idx>(m), static_cast<Idx>(n), Eigen::OuterStride<>(static_cast<Idx>(ldc)));
  if (k == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  ConstMatMap<T> am(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k),
                    Eigen::OuterStride<>(static_cast<Idx>(lda)));
  ConstMatMap<T> bm(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n),
                    Eigen::OuterStride<>(static_cast<Idx>(ldb)));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += alpha * (lhs * rhs);
    } else {
      cm.noalias() = alpha * (lhs * rhs);
    }
  };
  if (!trans_a && !trans_b) run(am, bm);
  if (!trans_a && trans_b) run(am, bm.transpose());
  if (trans_a && !trans_b) run(am.transpose(), bm);
  if (trans_a && trans_b) run(am.transpose(), bm.transpose());
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation.

template <typename T>
inline T gelu(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = kC * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  const T x2 = x * x;
  const T u = kC * (x + T(0.044715) * x2 * x);
  const T th = std::tanh(u);
  const T du = kC * (T(1) + T(3) * T(0.044715) * x2);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

// Vectorized forms of the two functions above over contiguous arrays.
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
void gelu_array(const T* x, T* y, std::size_t n) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  ConstArrMap<T> xa(x, static_cast<Eigen::Index>(n));
  ArrMap<T>(y, static_cast<Eigen::Index>(n)) = T(0.5) * xa * (T(1) + (kC * (xa + T(0.044715) * xa.cube())).tanh());
}

/// dx += dy * gelu'(x)
template <typename T>
void gelu_backward_array(const T* x, const T* dy, T* dx, std::size_t n) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  const auto len = static_cast<Eigen::Index>(n);
  ConstArrMap<T> xa(x, len);
  ConstArrMap<T> dya(dy, len);
  const auto x2 = xa.square();
  const Eigen::Array<T, Eigen::Dynamic, 1> th = (kC * (xa + T(0.044715) * x2 * xa)).tanh();
  ArrMap<T>(dx, len) +=
      dya * (T(0.5) * (T(1) + th) + T(0.5) * xa * (T(1) - th.square()) * kC * (T(1) + T(3 * 0.044715) * x2));
}

// ---------------------------------------------------------------------------
// Softmax over one row, max-subtracted.

template <typename T>
void softmax_row(std::span<const T> in, std::span<T> out) {
  const auto n = static_cast<Eigen::Index>(in.size());
  ConstArrMap<T> x(in.data(), n);
  ArrMap<T> y(out.data(), n);
  const T mx = x.maxCoeff();
  y = (x - mx).exp();
  // Plain loop: Eigen's packet reduction order depends on the row's address.
  T sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) sum += y[i];
  y *= T(1) / sum;
}

/// log(sum(exp(row))) computed stably.
template <typename T>
T log_sum_exp(std::span<const T> row) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : row) mx = v > mx ? v : mx;
  if (!std::isfinite(mx)) return mx;
  T sum = 0;
  for (T v : row) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

/// Index of the largest entry; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Layer normalization over the trailing axis.

template <typename T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean_out, T* rstd_out, std::size_t rows,
                        std::size_t width, T eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    T* yr = y + r * width;
    T mean = 0;
    for (std::size_t i = 0; i < width; ++i) mean += xr[i];
    mean /= static_cast<T>(width);
    T var = 0;
    for (std::size_t i = 0; i < width; ++i) {
      const T d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(width);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < width; ++i) {
      const T xhat = (xr[i] - mean) * rstd;
      yr[i] = gamma ? xhat * gamma[i] + beta[i] : xhat;
    }
    if (mean_out) mean_out[r] = mean;
    if (rstd_out) rstd_out[r] = rstd;
  }
}

template <typename T>
void layer_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma,
                         T* dbeta, std::size_t rows, std::size_t width) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    const T* dyr = dy + r * width;
    T sum_dxhat = 0;
    T sum_dxhat_xhat = 0;
    for (std::size_t i = 0; i < width; ++i) {
      const T xhat = (xr[i] - mean[r]) * rstd[r];
      const T dxhat = dyr[i] * gamma[i];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      if (dgamma) dgamma[i] += dyr[i] * xhat;
      if (dbeta) dbeta[i] += dyr[i];
    }
    if (!dx) continue;
    const T inv_w = T(1) / static_cast<T>(width);
    T* dxr = dx + r * width;
    for (std::size_t i = 0; i < width; ++i) {
      const T xhat = (xr[i] - mean[r]) * rstd[r];
      const T dxhat = dyr[i] * gamma[i];
      dxr[i] += rstd[r] * (dxhat - sum_dxhat * inv_w - xhat * sum_dxhat_xhat * inv_w);
    }
  }
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention on [batch, seq, channels] tensors
// whose channels are split into contiguous heads.

struct AttentionDims {
  std::size_t batch;
  std::size_t seq;
  std::size_t channels;
  std::size_t heads;
  std::size_t head_dim() const { return channels / heads; }
};

/// Writes y and the attention probabilities [batch, heads, seq, seq].
template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* y, T* probs, const AttentionDims& d, bool causal) {
  const std::size_t hd = d.head_dim();
  const std::size_t T_ = d.seq;
  const std::size_t C = d.channels;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t off = b * T_ * C + h * hd;
      T* p = probs + (b * d.heads + h) * T_ * T_;
      gemm<T>(false, true, T_, T_, hd, q + off, C, k + off, C, p, T_, false, scale);
      for (std::size_t i = 0; i < T_; ++i) {
        std::span<T> row(p + i * T_, T_);
        const std::size_t visible = causal ? i + 1 : T_;
        softmax_row<T>(row.first(visible), row.first(visible));
        for (std::size_t j = visible; j < T_; ++j) row[j] = 0;
      }
      gemm<T>(false, false, T_, hd, T_, p, T_, v + off, C, y + off, C, false);
    }
  }
}

/// Accumulates gradients into dq, dk, dv (any may be null).
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dy, T* dq, T* dk, T* dv,
                        const AttentionDims& d) {
  const std::size_t hd = d.head_dim();
  const std::size_t T_ = d.seq;
  const std::size_t C = d.channels;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  AlignedVector<T> dp(T_ * T_);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t off = b * T_ * C + h * hd;
      const T* p = probs + (b * d.heads + h) * T_ * T_;
      if (dv) gemm<T>(true, false, T_, hd, T_, p, T_, dy + off, C, dv + off, C, true);
      gemm<T>(false, true, T_, T_, hd, dy + off, C, v + off, C, dp.data(), T_, false);
      for (std::size_t i = 0; i < T_; ++i) {
        T* dpr = dp.data() + i * T_;
        const T* pr = p + i * T_;
        T dot = 0;
        for (std::size_t j = 0; j < T_; ++j) dot += dpr[j] * pr[j];
        for (std::size_t j = 0; j < T_; ++j) dpr[j] = pr[j] * (dpr[j] - dot) * scale;
      }
      if (dq) gemm<T>(false, false, T_, hd, T_, dp.data(), T_, k + off, C, dq + off, C, true);
      if (dk) gemm<T>(true, false, T_, hd, T_, dp.data(), T_, q + off, C, dk + off, C, true);
    }
  }
}

}  // namespace agr::kernels
