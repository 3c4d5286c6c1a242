#pragma once

// Differentiable primitives. Every op validates shapes, computes its forward
// value eagerly and records a backward rule that accumulates into the
// gradient buffers of inputs that require one.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "marrow/autograd.hpp"

namespace marrow {

/// C = A · B for A [m×k], B [k×n].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tape, std::size_t self) {
    const T* dc = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia)) {
      const std::vector<T> bt = detail::transpose(tape.value(ib), k, n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dc[i * n + j];
          const T* brow = bt.data() + j * k;
          T* darow = da + i * k;
          for (std::size_t t = 0; t < k; ++t) darow[t] += g * brow[t];
        }
    }
    if (T* db = tape.grad_buffer(ib)) {
      const T* av = tape.value(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          const T x = av[i * k + t];
          const T* dcrow = dc + i * n;
          T* dbrow = db + t * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += x * dcrow[j];
        }
    }
  });
}

/// C = A · Bᵀ for A [m×k], B [n×k]. Linear layers store weights as [out×in].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  const std::vector<T> bt = detail::transpose(b.value().data(), n, k);
  detail::gemm_nn(a.value().data(), bt.data(), out.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tape, std::size_t self) {
    const T* dc = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia)) {
      const T* bv = tape.value(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dc[i * n + j];
          const T* brow = bv + j * k;
          T* darow = da + i * k;
          for (std::size_t t = 0; t < k; ++t) darow[t] += g * brow[t];
        }
    }
    if (T* db = tape.grad_buffer(ib)) {
      const T* av = tape.value(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dc[i * n + j];
          const T* arow = av + i * k;
          T* dbrow = db + j * k;
          for (std::size_t t = 0; t < k; ++t) dbrow[t] += g * arow[t];
        }
    }
  });
}

/// Elementwise a + b. Both operands must hold the same number of elements;
/// the result takes a's shape.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const std::size_t n = a.size();
  std::vector<T> out(n);
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.shape(), std::move(out), {a, b}, [ia, ib, n](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia))
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
    if (T* db = tape.grad_buffer(ib))
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
  });
}

/// Elementwise a ⊙ b.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  const std::size_t n = a.size();
  std::vector<T> out(n);
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.shape(), std::move(out), {a, b}, [ia, ib, n](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia)) {
      const T* bv = tape.value(ib);
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bv[i];
    }
    if (T* db = tape.grad_buffer(ib)) {
      const T* av = tape.value(ia);
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  auto av = a.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * factor;
  const std::size_t ia = a.id;
  return a.tape->record(a.shape(), std::move(out), {a}, [ia, n, factor](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia))
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * factor;
  });
}

/// x · sigmoid(x).
template <typename T>
Var<T> silu(Var<T> a) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  auto av = a.value();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / (T(1) + std::exp(-av[i]));
  const std::size_t ia = a.id;
  return a.tape->record(a.shape(), std::move(out), {a}, [ia, n](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad_of(self);
    if (T* da = tape.grad_buffer(ia)) {
      const T* x = tape.value(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        da[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    }
  });
}

/// Sum of all elements, as a scalar.
template <typename T>
Var<T> sum(Var<T> a) {
  const std::size_t n = a.size();
  T total = 0;
  for (T v : a.value()) total += v;
  const std::size_t ia = a.id;
  return a.tape->record({}, {total}, {a}, [ia, n](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad_of(self)[0];
    if (T* da = tape.grad_buffer(ia))
      for (std::size_t i = 0; i < n; ++i) da[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  if (a.size() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// <a, b> over all elements, as a scalar.
template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const std::size_t n = a.size();
  T total = 0;
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) total += av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record({}, {total}, {a, b}, [ia, ib, n](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad_of(self)[0];
    if (T* da = tape.grad_buffer(ia)) {
      const T* bv = tape.value(ib);
      for (std::size_t i = 0; i < n; ++i) da[i] += g * bv[i];
    }
    if (T* db = tape.grad_buffer(ib)) {
      const T* av = tape.value(ia);
      for (std::size_t i = 0; i < n; ++i) db[i] += g * av[i];
    }
  });
}

/// Per-row RMS normalization with a learned gain:
/// out[r][i] = x[r][i] · gamma[i] / sqrt(mean_i(x[r]²) + eps).
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gamma, T eps) {
  detail::require_matrix(x, "rms_norm");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (gamma.size() != d) {
    throw DimensionError("rms_norm: gain " + shape_str(gamma.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(rows * d);
  std::vector<T> inv_rms(rows);
  auto xv = x.value();
  auto gv = gamma.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += xv[r * d + i] * xv[r * d + i];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] * inv * gv[i];
  }
  const std::size_t ix = x.id, ig = gamma.id;
  return x.tape->record(x.shape(), std::move(out), {x, gamma},
                        [ix, ig, rows, d, inv_rms = std::move(inv_rms)](Tape<T>& tape, std::size_t self) {
                          const T* g = tape.grad_of(self);
                          const T* xv = tape.value(ix);
                          const T* gv = tape.value(ig);
                          T* dx = tape.grad_buffer(ix);
                          T* dg = tape.grad_buffer(ig);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T inv = inv_rms[r];
                            const T* xr = xv + r * d;
                            const T* gr = g + r * d;
                            if (dg)
                              for (std::size_t i = 0; i < d; ++i) dg[i] += gr[i] * xr[i] * inv;
                            if (dx) {
                              // dn = g ⊙ gamma; dx = inv · (dn − n · <dn, n>/d), n = x · inv
                              T proj = 0;
                              for (std::size_t i = 0; i < d; ++i) proj += gr[i] * gv[i] * xr[i] * inv;
                              proj /= static_cast<T>(d);
                              for (std::size_t i = 0; i < d; ++i)
                                dx[r * d + i] += inv * (gr[i] * gv[i] - xr[i] * inv * proj);
                            }
                          }
                        });
}

/// Row-wise softmax with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  detail::require_matrix(x, "softmax_rows");
  detail::check_finite(x.value(), "softmax_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  std::vector<T> out(rows * cols);
  auto xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  const std::size_t ix = x.id;
  return x.tape->record(x.shape(), std::move(out), {x}, [ix, rows, cols](Tape<T>& tape, std::size_t self) {
    T* dx = tape.grad_buffer(ix);
    if (!dx) return;
    const T* g = tape.grad_of(self);
    const T* y = tape.value(self);
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - s);
    }
  });
}

/// Row-wise log-softmax, x − max − log Σ exp(x − max).
template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  detail::require_matrix(x, "log_softmax_rows");
  detail::check_finite(x.value(), "log_softmax_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  std::vector<T> out(rows * cols);
  auto xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lz;
  }
  const std::size_t ix = x.id;
  return x.tape->record(x.shape(), std::move(out), {x}, [ix, rows, cols](Tape<T>& tape, std::size_t self) {
    T* dx = tape.grad_buffer(ix);
    if (!dx) return;
    const T* g = tape.grad_of(self);
    const T* y = tape.value(self);
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * s;
    }
  });
}

/// Rows of `table` selected by `ids`, as an [n×d] matrix.
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  auto tv = table.value();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw ContractError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                          std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  const std::size_t it = table.id;
  std::vector<std::int32_t> rows(ids.begin(), ids.end());
  return table.tape->record({ids.size(), d}, std::move(out), {table},
                            [it, d, rows = std::move(rows)](Tape<T>& tape, std::size_t self) {
                              T* dt = tape.grad_buffer(it);
                              if (!dt) return;
                              const T* g = tape.grad_of(self);
                              for (std::size_t r = 0; r < rows.size(); ++r) {
                                T* dst = dt + static_cast<std::size_t>(rows[r]) * d;
                                for (std::size_t i = 0; i < d; ++i) dst[i] += g[r * d + i];
                              }
                            });
}

namespace detail {

// cos/sin tables for rotary embeddings, [positions × half_dim].
template <typename T>
void rope_tables(std::size_t positions, std::size_t head_dim, double theta, std::vector<T>& cos_t,
                 std::vector<T>& sin_t) {
  const std::size_t half = head_dim / 2;
  cos_t.resize(positions * half);
  sin_t.resize(positions * half);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cos_t[p * half + i] = static_cast<T>(std::cos(angle));
      sin_t[p * half + i] = static_cast<T>(std::sin(angle));
    }
}

}  // namespace detail

/// Rotary position embedding on [seq×d], applied independently per head to
/// interleaved pairs (2i, 2i+1); row index is the position.
template <typename T>
Var<T> rope(Var<T> x, std::size_t n_heads, double theta) {
  detail::require_matrix(x, "rope");
  const std::size_t seq = x.shape()[0], d = x.shape()[1];
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(d) + " does not split into even heads of " +
                         std::to_string(n_heads));
  }
  const std::size_t hd = d / n_heads, half = hd / 2;
  std::vector<T> cos_t, sin_t;
  detail::rope_tables(seq, hd, theta, cos_t, sin_t);
  std::vector<T> out(seq * d);
  auto xv = x.value();
  for (std::size_t p = 0; p < seq; ++p)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t o = p * d + h * hd + 2 * i;
        const T c = cos_t[p * half + i], s = sin_t[p * half + i];
        out[o] = xv[o] * c - xv[o + 1] * s;
        out[o + 1] = xv[o] * s + xv[o + 1] * c;
      }
  const std::size_t ix = x.id;
  return x.tape->record(
      x.shape(), std::move(out), {x},
      [ix, seq, d, n_heads, hd, half, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](Tape<T>& tape,
                                                                                           std::size_t self) {
        T* dx = tape.grad_buffer(ix);
        if (!dx) return;
        const T* g = tape.grad_of(self);
        for (std::size_t p = 0; p < seq; ++p)
          for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
              const std::size_t o = p * d + h * hd + 2 * i;
              const T c = cos_t[p * half + i], s = sin_t[p * half + i];
              dx[o] += g[o] * c + g[o + 1] * s;
              dx[o + 1] += -g[o] * s + g[o + 1] * c;
            }
      });
}

/// Multi-head causal self-attention on already-projected q, k, v [seq×d].
/// Position i attends to positions 0..i only; scores are scaled by
/// 1/sqrt(head_dim). Returns the concatenated head outputs [seq×d].
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads) {
  detail::require_matrix(q, "causal_attention");
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  const std::size_t seq = q.shape()[0], d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
  auto qv = q.value();
  auto kv = k.value();
  auto vv = v.value();
  // probs[h][i][j] for j <= i
  std::vector<T> probs(n_heads * seq * seq, T(0));
  std::vector<T> out(seq * d, T(0));
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < seq; ++i) {
      T* pr = probs.data() + (h * seq + i) * seq;
      const T* qi = qv.data() + i * d + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = kv.data() + j * d + h * hd;
        T s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
        pr[j] = s * inv_scale;
        mx = std::max(mx, pr[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        pr[j] = std::exp(pr[j] - mx);
        z += pr[j];
      }
      T* oi = out.data() + i * d + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        pr[j] /= z;
        const T* vj = vv.data() + j * d + h * hd;
        for (std::size_t t = 0; t < hd; ++t) oi[t] += pr[j] * vj[t];
      }
    }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      q.shape(), std::move(out), {q, k, v},
      [iq, ik, iv, seq, d, n_heads, hd, inv_scale, probs = std::move(probs)](Tape<T>& tape, std::size_t self) {
        const T* g = tape.grad_of(self);
        const T* qv = tape.value(iq);
        const T* kv = tape.value(ik);
        const T* vv = tape.value(iv);
        T* dq = tape.grad_buffer(iq);
        T* dk = tape.grad_buffer(ik);
        T* dv = tape.grad_buffer(iv);
        std::vector<T> dp(seq);
        for (std::size_t h = 0; h < n_heads; ++h)
          for (std::size_t i = 0; i < seq; ++i) {
            const T* pr = probs.data() + (h * seq + i) * seq;
            const T* gi = g + i * d + h * hd;
            T pdot = 0;
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = vv + j * d + h * hd;
              T s = 0;
              for (std::size_t t = 0; t < hd; ++t) s += gi[t] * vj[t];
              dp[j] = s;
              pdot += pr[j] * s;
              if (dv) {
                T* dvj = dv + j * d + h * hd;
                for (std::size_t t = 0; t < hd; ++t) dvj[t] += pr[j] * gi[t];
              }
            }
            const T* qi = qv + i * d + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = pr[j] * (dp[j] - pdot) * inv_scale;
              const T* kj = kv + j * d + h * hd;
              if (dq) {
                T* dqi = dq + i * d + h * hd;
                for (std::size_t t = 0; t < hd; ++t) dqi[t] += ds * kj[t];
              }
              if (dk) {
                T* dkj = dk + j * d + h * hd;
                for (std::size_t t = 0; t < hd; ++t) dkj[t] += ds * qi[t];
              }
            }
          }
      });
}

/// Scales each row to unit L2 norm.
template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
  detail::require_matrix(x, "l2_normalize_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(rows * d);
  std::vector<T> norms(rows);
  auto xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += xv[r * d + i] * xv[r * d + i];
    const T norm = std::max(std::sqrt(ss), std::numeric_limits<T>::min());
    norms[r] = norm;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] / norm;
  }
  const std::size_t ix = x.id;
  return x.tape->record(x.shape(), std::move(out), {x},
                        [ix, rows, d, norms = std::move(norms)](Tape<T>& tape, std::size_t self) {
                          T* dx = tape.grad_buffer(ix);
                          if (!dx) return;
                          const T* g = tape.grad_of(self);
                          const T* y = tape.value(self);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T proj = 0;
                            for (std::size_t i = 0; i < d; ++i) proj += y[r * d + i] * g[r * d + i];
                            for (std::size_t i = 0; i < d; ++i)
                              dx[r * d + i] += (g[r * d + i] - y[r * d + i] * proj) / norms[r];
                          }
                        });
}

/// Row `index` of a matrix as [1×cols].
template <typename T>
Var<T> row(Var<T> x, std::size_t index) {
  detail::require_matrix(x, "row");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (index >= rows) throw ContractError("row: index " + std::to_string(index) + " out of " + std::to_string(rows));
  auto xv = x.value();
  std::vector<T> out(xv.begin() + index * cols, xv.begin() + (index + 1) * cols);
  const std::size_t ix = x.id;
  return x.tape->record({1, cols}, std::move(out), {x}, [ix, index, cols](Tape<T>& tape, std::size_t self) {
    T* dx = tape.grad_buffer(ix);
    if (!dx) return;
    const T* g = tape.grad_of(self);
    for (std::size_t i = 0; i < cols; ++i) dx[index * cols + i] += g[i];
  });
}

/// Vertical concatenation of matrices sharing a column count.
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape<T>* tape = parts[0].tape;
  std::size_t cols = 0, rows = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (ids.empty()) cols = p.shape()[1];
    if (p.shape()[1] != cols) {
      throw DimensionError("concat_rows: column counts differ (" + shape_str(p.shape()) + ")");
    }
    ids.push_back(p.id);
    offsets.push_back(rows * cols);
    rows += p.shape()[0];
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) {
    auto v = p.value();
    out.insert(out.end(), v.begin(), v.end());
  }
  return tape->record_span({rows, cols}, std::move(out), parts,
                           [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& t, std::size_t self) {
                             const T* g = t.grad_of(self);
                             for (std::size_t p = 0; p < ids.size(); ++p) {
                               T* dp = t.grad_buffer(ids[p]);
                               if (!dp) continue;
                               const std::size_t n = t.node(ids[p]).n;
                               for (std::size_t i = 0; i < n; ++i) dp[i] += g[offsets[p] + i];
                             }
                           });
}

/// out[r] = x[r][columns[r]].
template <typename T>
Var<T> pick(Var<T> x, std::span<const std::size_t> columns) {
  detail::require_matrix(x, "pick");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (columns.size() != rows) {
    throw DimensionError("pick: " + std::to_string(columns.size()) + " indices for " + std::to_string(rows) + " rows");
  }
  std::vector<T> out(rows);
  auto xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    if (columns[r] >= cols) throw ContractError("pick: column index out of range");
    out[r] = xv[r * cols + columns[r]];
  }
  const std::size_t ix = x.id;
  std::vector<std::size_t> idx(columns.begin(), columns.end());
  return x.tape->record({rows}, std::move(out), {x}, [ix, cols, idx = std::move(idx)](Tape<T>& tape, std::size_t self) {
    T* dx = tape.grad_buffer(ix);
    if (!dx) return;
    const T* g = tape.grad_of(self);
    for (std::size_t r = 0; r < idx.size(); ++r) dx[r * cols + idx[r]] += g[r];
  });
}

/// Reinterprets the data under a new shape with the same element count.
template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xv = x.value();
  std::vector<T> out(xv.begin(), xv.end());
  const std::size_t ix = x.id, n = x.size();
  return x.tape->record(std::move(shape), std::move(out), {x}, [ix, n](Tape<T>& tape, std::size_t self) {
    T* dx = tape.grad_buffer(ix);
    if (!dx) return;
    const T* g = tape.grad_of(self);
    for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
  });
}

}  // namespace marrow
