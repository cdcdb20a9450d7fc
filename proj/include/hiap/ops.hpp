// Forward primitives and their backward rules.
#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "hiap/parallel.hpp"
#include "hiap/tensor.hpp"

namespace hiap {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_rows(m, k * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      T* __restrict crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// dA[m,k] += G[m,n] * B[k,n]^T, via an explicit transpose of B so the inner
// loop runs over contiguous k.
template <typename T>
void gemm_nt(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), da, m, n, k);
}

// dB[k,n] += A[m,k]^T * G[m,n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict g, T* __restrict db, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_rows(k, m * n, [=](std::size_t p0, std::size_t p1) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* __restrict grow = g + i * n;
      for (std::size_t p = p0; p < p1; ++p) {
        const T av = a[i * k + p];
        T* __restrict drow = db + p * n;
        for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
      }
    }
  });
}

// b broadcasts onto a when it is a scalar or its shape is a suffix of a's shape.
template <typename T>
void check_broadcast(OpKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.numel() == 1) return;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size()) throw_shape_error(kind, as, bs, "right operand must broadcast onto left");
  if (!std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size())))
    throw_shape_error(kind, as, bs, "trailing axes differ");
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.shape().back();
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// a[..., m, k] x b[k, n] or batched a[B, m, k] x b[B, k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || (b.rank() != 2 && b.rank() != 3)) throw_shape_error(OpKind::matmul, a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  if (b.rank() == 2) {
    if (b.dim(0) != k) throw_shape_error(OpKind::matmul, a.shape(), b.shape(), "inner dimensions differ");
    const std::size_t n = b.dim(1), rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(rows * n, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
    return make_result<T>(OpKind::matmul, std::move(out_shape), std::move(out), {a, b},
                          [rows, k, n](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                            if (in[0].requires_grad())
                              detail::gemm_nt(g.data(), in[1].data().data(), in[0].grad().data(), rows, k, n);
                            if (in[1].requires_grad())
                              detail::gemm_tn(in[0].data().data(), g.data(), in[1].grad().data(), rows, k, n);
                          });
  }
  if (a.rank() != 3 || a.dim(0) != b.dim(0) || b.dim(1) != k)
    throw_shape_error(OpKind::matmul, a.shape(), b.shape(), "batched operands must be [B,m,k] x [B,k,n]");
  const std::size_t batch = a.dim(0), m = a.dim(1), n = b.dim(2);
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
  return make_result<T>(OpKind::matmul, {batch, m, n}, std::move(out), {a, b},
                        [batch, m, k, n](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          for (std::size_t i = 0; i < batch; ++i) {
                            const T* gi = g.data() + i * m * n;
                            if (in[0].requires_grad())
                              detail::gemm_nt(gi, in[1].data().data() + i * k * n,
                                              in[0].grad().data() + i * m * k, m, k, n);
                            if (in[1].requires_grad())
                              detail::gemm_tn(in[0].data().data() + i * m * k, gi,
                                              in[1].grad().data() + i * k * n, m, k, n);
                          }
                        });
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1), batch = a.numel() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(a.numel());
  auto src = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = src[b * r * c + i * c + j];
  return make_result<T>(OpKind::transpose, std::move(out_shape), std::move(out), {a},
                        [batch, r, c](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                ga[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(OpKind::add, a, b);
  const std::size_t nb = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % nb];
  return make_result<T>(OpKind::add, a.shape(), std::move(out), {a, b},
                        [nb](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          if (in[0].requires_grad()) {
                            auto ga = in[0].grad();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (in[1].requires_grad()) {
                            auto gb = in[1].grad();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T c) {
  return add(a, Tensor<T>::scalar(c));
}

/// Elementwise product; the right operand may broadcast along trailing axes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(OpKind::broadcast_mul, a, b);
  const std::size_t nb = b.numel();
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % nb];
  return make_result<T>(OpKind::broadcast_mul, a.shape(), std::move(out), {a, b},
                        [nb](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ad = in[0].data();
                          auto bd = in[1].data();
                          if (in[0].requires_grad()) {
                            auto ga = in[0].grad();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i % nb];
                          }
                          if (in[1].requires_grad()) {
                            auto gb = in[1].grad();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * ad[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  return make_result<T>(OpKind::scale, a.shape(), std::move(out), {a},
                        [s](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

/// Exact GELU: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * ad[i] * (T(1) + std::erf(ad[i] * inv_sqrt2));
  return make_result<T>(OpKind::gelu, a.shape(), std::move(out), {a},
                        [inv_sqrt2](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto x = in[0].data();
                          auto ga = in[0].grad();
                          const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
                            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
                            ga[i] += g[i] * (cdf + x[i] * pdf);
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  return make_result<T>(OpKind::relu, a.shape(), std::move(out), {a},
                        [](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto x = in[0].data();
                          auto ga = in[0].grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (x[i] > T(0)) ga[i] += g[i];
                        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid_scalar(ad[i]);
  // saved output is needed for the derivative
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(OpKind::sigmoid, a.shape(), std::move(out), {a},
                        [saved](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          const auto& y = *saved;
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
                        });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  const std::size_t n = detail::last_dim(a), rows = a.numel() / n;
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    const T inv = static_cast<T>(1.0 / total);
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(OpKind::softmax_lastdim, a.shape(), std::move(out), {a},
                        [saved, n, rows](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          const auto& y = *saved;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                          }
                        });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& a) {
  const std::size_t n = detail::last_dim(a), rows = a.numel() / n;
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(x[j] - mx));
    const T lse = mx + static_cast<T>(std::log(total));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>(OpKind::log_softmax_lastdim, a.shape(), std::move(out), {a},
                        [saved, n, rows](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          const auto& y = *saved;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T gsum = 0;
                            for (std::size_t j = 0; j < n; ++j) gsum += g[r * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gsum;
                          }
                        });
}

/// Normalizes over the last axis, then applies gamma/beta (shape [D]).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n)
    throw_shape_error(OpKind::layer_norm, x.shape(), gamma.shape(), "affine parameters must match last axis");
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * n;
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
    (*inv_std)[r] = istd;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>(row[j] - mean) * istd;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      OpKind::layer_norm, x.shape(), std::move(out), {x, gamma, beta},
      [xhat, inv_std, n, rows](const std::vector<Tensor<T>>& in, std::span<const T> g) {
        const auto& h = *xhat;
        auto gd = in[1].data();
        if (in[1].requires_grad() || in[2].requires_grad()) {
          auto gg = in[1].grad();
          auto gb = in[2].grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += g[r * n + j] * h[r * n + j];
              gb[j] += g[r * n + j];
            }
        }
        if (in[0].requires_grad()) {
          auto gx = in[0].grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = g[r * n + j] * gd[j];
              mean_dh += dh;
              mean_dh_h += dh * h[r * n + j];
            }
            mean_dh /= static_cast<T>(n);
            mean_dh_h /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = g[r * n + j] * gd[j];
              gx[r * n + j] += (*inv_std)[r] * (dh - mean_dh - h[r * n + j] * mean_dh_h);
            }
          }
        }
      });
}

/// Sum of all elements (64-bit accumulation), shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>(OpKind::sum, {1}, {static_cast<T>(total)}, {a},
                        [](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (auto& v : ga) v += g[0];
                        });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  double total = 0;
  for (T v : a.data()) total += v;
  const std::size_t n = a.numel();
  return make_result<T>(OpKind::reduce_mean, {1}, {static_cast<T>(total / static_cast<double>(n))}, {a},
                        [n](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          const T share = g[0] / static_cast<T>(n);
                          for (auto& v : ga) v += share;
                        });
}

/// Sums the last axis away; rank-1 input gives shape [1].
template <typename T>
Tensor<T> sum_lastdim(const Tensor<T>& a) {
  const std::size_t n = detail::last_dim(a), rows = a.numel() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(rows);
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += ad[r * n + j];
    out[r] = static_cast<T>(total);
  }
  return make_result<T>(OpKind::sum_lastdim, std::move(out_shape), std::move(out), {a},
                        [n, rows](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) throw_shape_error(OpKind::reshape, a.shape(), shape, "element counts differ");
  return make_result<T>(OpKind::reshape, std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), {a},
                        [](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

/// Contiguous flat range [offset, offset + numel(shape)) viewed as `shape`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t offset, Shape shape) {
  const std::size_t n = numel(shape);
  if (offset + n > a.numel())
    throw_shape_error(OpKind::slice, a.shape(), shape, "range past end at offset " + std::to_string(offset));
  auto ad = a.data();
  std::vector<T> out(ad.begin() + static_cast<std::ptrdiff_t>(offset),
                     ad.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return make_result<T>(OpKind::slice, std::move(shape), std::move(out), {a},
                        [offset](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
                        });
}

/// x[B,P,D] with token[D] inserted at position 0 -> [B,P+1,D].
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  if (x.rank() != 3 || token.numel() != x.dim(2))
    throw_shape_error(OpKind::prepend_token, x.shape(), token.shape());
  const std::size_t batch = x.dim(0), p = x.dim(1), d = x.dim(2);
  std::vector<T> out(batch * (p + 1) * d);
  auto xd = x.data();
  auto td = token.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(td.begin(), td.end(), out.begin() + static_cast<std::ptrdiff_t>(b * (p + 1) * d));
    std::copy(xd.begin() + static_cast<std::ptrdiff_t>(b * p * d), xd.begin() + static_cast<std::ptrdiff_t>((b + 1) * p * d),
              out.begin() + static_cast<std::ptrdiff_t>(b * (p + 1) * d + d));
  }
  return make_result<T>(OpKind::prepend_token, {batch, p + 1, d}, std::move(out), {x, token},
                        [batch, p, d](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          if (in[0].requires_grad()) {
                            auto gx = in[0].grad();
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t i = 0; i < p * d; ++i) gx[b * p * d + i] += g[b * (p + 1) * d + d + i];
                          }
                          if (in[1].requires_grad()) {
                            auto gt = in[1].grad();
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t j = 0; j < d; ++j) gt[j] += g[b * (p + 1) * d + j];
                          }
                        });
}

/// x[B,N,D] -> x[:, index, :] as [B,D].
template <typename T>
Tensor<T> select_token(const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 3 || index >= x.dim(1)) throw_shape_error(OpKind::select_token, x.shape(), {index});
  const std::size_t batch = x.dim(0), nt = x.dim(1), d = x.dim(2);
  std::vector<T> out(batch * d);
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] = xd[(b * nt + index) * d + j];
  return make_result<T>(OpKind::select_token, {batch, d}, std::move(out), {x},
                        [batch, nt, d, index](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto gx = in[0].grad();
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t j = 0; j < d; ++j) gx[(b * nt + index) * d + j] += g[b * d + j];
                        });
}

/// Forward: 1 where soft > threshold else 0. Backward: identity onto soft.
template <typename T>
Tensor<T> straight_through(const Tensor<T>& soft, T threshold = T(0.5)) {
  std::vector<T> out(soft.numel());
  auto sd = soft.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sd[i] > threshold ? T(1) : T(0);
  return make_result<T>(OpKind::straight_through, soft.shape(), std::move(out), {soft},
                        [](const std::vector<Tensor<T>>& in, std::span<const T> g) {
                          auto ga = in[0].grad();
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

}  // namespace hiap
