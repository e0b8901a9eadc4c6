#pragma once

// Differentiable primitives. Reductions accumulate sequentially in row-major
// order so that results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sdd/errors.hpp"
#include "sdd/tensor.hpp"

namespace sdd {

/// Half-open index interval [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool operator==(const IndexRange&) const = default;
};

namespace detail {

inline void require_positive_temperature(double t) {
  if (!(t > 0.0)) throw ConfigError("temperature must be > 0, got " + std::to_string(t));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
  }
}

template <class T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.shape().back();
}

inline void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t k) {
  if (labels.size() != rows) {
    throw DimensionError("expected " + std::to_string(rows) + " labels, got " +
                         std::to_string(labels.size()));
  }
  for (auto y : labels) {
    if (y >= k) {
      throw DataError("label " + std::to_string(y) + " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::record<T>("matmul", {&a, &b}, Tensor<T>({m, n}, std::move(out)),
                           [m, k, n](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             const T* A = nd.inputs[0]->data.data();
                             const T* B = nd.inputs[1]->data.data();
                             if (T* ga = detail::grad_of<T>(nd, 0)) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   T acc = 0;
                                   for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
                                   ga[i * k + p] += acc;
                                 }
                             }
                             if (T* gb = detail::grad_of<T>(nd, 1)) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   const T av = A[i * k + p];
                                   for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                                 }
                             }
                           });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::record<T>("add", {&a, &b}, Tensor<T>(a.shape(), std::move(out)),
                           [](typename Tape<T>::Node& nd) {
                             const auto& g = nd.output->grad;
                             for (std::size_t s = 0; s < 2; ++s)
                               if (T* gi = detail::grad_of<T>(nd, s))
                                 for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::record<T>("scale", {&a}, Tensor<T>(a.shape(), std::move(out)),
                           [factor](typename Tape<T>::Node& nd) {
                             const auto& g = nd.output->grad;
                             if (T* gi = detail::grad_of<T>(nd, 0))
                               for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * factor;
                           });
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::record<T>("mul", {&a, &b}, Tensor<T>(a.shape(), std::move(out)),
                           [](typename Tape<T>::Node& nd) {
                             const auto& g = nd.output->grad;
                             const auto& av = nd.inputs[0]->data;
                             const auto& bv = nd.inputs[1]->data;
                             if (T* ga = detail::grad_of<T>(nd, 0))
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                             if (T* gb = detail::grad_of<T>(nd, 1))
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.data()) acc += v;
  return detail::record<T>("sum", {&a}, Tensor<T>::scalar(acc), [](typename Tape<T>::Node& nd) {
    const T g = nd.output->grad[0];
    if (T* gi = detail::grad_of<T>(nd, 0))
      for (std::size_t i = 0; i < nd.inputs[0]->data.size(); ++i) gi[i] += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.data()) acc += v;
  const auto n = static_cast<T>(a.size());
  return detail::record<T>("mean", {&a}, Tensor<T>::scalar(acc / n), [n](typename Tape<T>::Node& nd) {
    const T g = nd.output->grad[0] / n;
    if (T* gi = detail::grad_of<T>(nd, 0))
      for (std::size_t i = 0; i < nd.inputs[0]->data.size(); ++i) gi[i] += g;
  });
}

/// Same values under a new shape (copy).
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return detail::record<T>("reshape", {&a}, Tensor<T>(std::move(shape), a.values()),
                           [](typename Tape<T>::Node& nd) {
                             const auto& g = nd.output->grad;
                             if (T* gi = detail::grad_of<T>(nd, 0))
                               for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                           });
}

/// max(x, 0); the subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return detail::record<T>("relu", {&x}, Tensor<T>(x.shape(), std::move(out)),
                           [](typename Tape<T>::Node& nd) {
                             const auto& g = nd.output->grad;
                             const auto& xv = nd.inputs[0]->data;
                             if (T* gi = detail::grad_of<T>(nd, 0))
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (xv[i] > T(0)) gi[i] += g[i];
                           });
}

/// Adds bias[c] to every element of channel c (dimension 1) of a B x C x ... tensor.
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.ndim() < 2 || bias.size() != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias of " + to_string(bias.shape()) + " for input " +
                         to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), c = x.dim(1), inner = x.size() / (b * c);
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* o = out.data() + (i * c + ch) * inner;
      const T bv = bias[ch];
      for (std::size_t p = 0; p < inner; ++p) o[p] += bv;
    }
  return detail::record<T>("add_channel_bias", {&x, &bias}, Tensor<T>(x.shape(), std::move(out)),
                           [b, c, inner](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             if (T* gx = detail::grad_of<T>(nd, 0))
                               for (std::size_t i = 0; i < b * c * inner; ++i) gx[i] += g[i];
                             if (T* gb = detail::grad_of<T>(nd, 1))
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const T* gr = g + (i * c + ch) * inner;
                                   T acc = 0;
                                   for (std::size_t p = 0; p < inner; ++p) acc += gr[p];
                                   gb[ch] += acc;
                                 }
                           });
}

/// 2-D cross-correlation. x: B x C x H x W, kernel: O x C x k x k.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
  if (x.ndim() != 4 || kernel.ndim() != 4 || kernel.dim(1) != x.dim(1) || kernel.dim(2) != kernel.dim(3)) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " +
                         to_string(kernel.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernel.dim(0), k = kernel.dim(2);
  if (k > H + 2 * padding || k > W + 2 * padding) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                      to_string(x.shape()));
  }
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t P = Ho * Wo, R = C * k * k;

  // im2col per sample: cols[b][r * P + p]; kept for the backward pass.
  auto cols = std::make_shared<std::vector<T>>(B * R * P, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.data().data() + b * C * H * W;
    T* cb = cols->data() + b * R * P;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* crow = cb + ((c * k + ki) * k + kj) * P;
          for (std::size_t oi = 0; oi < Ho; ++oi) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t oj = 0; oj < Wo; ++oj) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
              crow[oi * Wo + oj] = xb[(c * H + ii) * W + jj];
            }
          }
        }
  }

  std::vector<T> out(B * O * P, T(0));
  const T* K = kernel.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const T* cb = cols->data() + b * R * P;
    for (std::size_t o = 0; o < O; ++o) {
      T* orow = out.data() + (b * O + o) * P;
      for (std::size_t r = 0; r < R; ++r) {
        const T kv = K[o * R + r];
        const T* crow = cb + r * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += kv * crow[p];
      }
    }
  }

  return detail::record<T>(
      "conv2d", {&x, &kernel}, Tensor<T>({B, O, Ho, Wo}, std::move(out)),
      [=](typename Tape<T>::Node& nd) {
        const T* g = nd.output->grad.data();
        const T* K = nd.inputs[1]->data.data();
        if (T* gk = detail::grad_of<T>(nd, 1)) {
          std::vector<T> colT(P * R);
          for (std::size_t b = 0; b < B; ++b) {
            const T* cb = cols->data() + b * R * P;
            for (std::size_t r = 0; r < R; ++r)
              for (std::size_t p = 0; p < P; ++p) colT[p * R + r] = cb[r * P + p];
            for (std::size_t o = 0; o < O; ++o) {
              T* gkrow = gk + o * R;
              const T* grow = g + (b * O + o) * P;
              for (std::size_t p = 0; p < P; ++p) {
                const T gv = grow[p];
                const T* ct = colT.data() + p * R;
                for (std::size_t r = 0; r < R; ++r) gkrow[r] += gv * ct[r];
              }
            }
          }
        }
        if (T* gx = detail::grad_of<T>(nd, 0)) {
          std::vector<T> dcol(R * P);
          for (std::size_t b = 0; b < B; ++b) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            for (std::size_t o = 0; o < O; ++o) {
              const T* grow = g + (b * O + o) * P;
              for (std::size_t r = 0; r < R; ++r) {
                const T kv = K[o * R + r];
                T* drow = dcol.data() + r * P;
                for (std::size_t p = 0; p < P; ++p) drow[p] += kv * grow[p];
              }
            }
            T* gxb = gx + b * C * H * W;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const T* drow = dcol.data() + ((c * k + ki) * k + kj) * P;
                  for (std::size_t oi = 0; oi < Ho; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t oj = 0; oj < Wo; ++oj) {
                      const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                      gxb[(c * H + ii) * W + jj] += drow[oi * Wo + oj];
                    }
                  }
                }
          }
        }
      });
}

/// Per-channel mean over the spatial window rows x cols of a B x C x H x W tensor.
template <class T>
Tensor<T> avgpool_region(const Tensor<T>& x, IndexRange rows, IndexRange cols) {
  if (x.ndim() != 4) throw DimensionError("avgpool_region: expected 4-D input, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (rows.size() == 0 || cols.size() == 0 || rows.end > H || cols.end > W) {
    throw RangeError("avgpool_region: window rows [" + std::to_string(rows.begin) + "," +
                     std::to_string(rows.end) + ") cols [" + std::to_string(cols.begin) + "," +
                     std::to_string(cols.end) + ") invalid for " + to_string(x.shape()));
  }
  const T inv = T(1) / static_cast<T>(rows.size() * cols.size());
  std::vector<T> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* xp = x.data().data() + bc * H * W;
    T acc = 0;
    for (std::size_t i = rows.begin; i < rows.end; ++i)
      for (std::size_t j = cols.begin; j < cols.end; ++j) acc += xp[i * W + j];
    out[bc] = acc * inv;
  }
  return detail::record<T>("avgpool_region", {&x}, Tensor<T>({B, C}, std::move(out)),
                           [=](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             if (T* gx = detail::grad_of<T>(nd, 0))
                               for (std::size_t bc = 0; bc < B * C; ++bc) {
                                 const T gv = g[bc] * inv;
                                 T* gp = gx + bc * H * W;
                                 for (std::size_t i = rows.begin; i < rows.end; ++i)
                                   for (std::size_t j = cols.begin; j < cols.end; ++j) gp[i * W + j] += gv;
                               }
                           });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimensionError("global_avg_pool: expected 4-D input, got " + to_string(x.shape()));
  return avgpool_region(x, {0, x.dim(2)}, {0, x.dim(3)});
}

/// Applies W (c x K) at every spatial position: B x c x h x w -> B x K x h x w.
template <class T>
Tensor<T> pointwise_project(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.ndim() != 4 || w.ndim() != 2 || w.dim(0) != x.dim(1)) {
    throw DimensionError("pointwise_project: features " + to_string(x.shape()) +
                         " incompatible with projection " + to_string(w.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3), K = w.dim(1);
  std::vector<T> out(B * K * P, T(0));
  const T* X = x.data().data();
  const T* Wd = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xr = X + (b * C + c) * P;
      for (std::size_t k = 0; k < K; ++k) {
        const T wv = Wd[c * K + k];
        T* orow = out.data() + (b * K + k) * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += wv * xr[p];
      }
    }
  return detail::record<T>(
      "pointwise_project", {&x, &w}, Tensor<T>({B, K, x.dim(2), x.dim(3)}, std::move(out)),
      [=](typename Tape<T>::Node& nd) {
        const T* g = nd.output->grad.data();
        const T* X = nd.inputs[0]->data.data();
        const T* Wd = nd.inputs[1]->data.data();
        if (T* gx = detail::grad_of<T>(nd, 0))
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              T* gr = gx + (b * C + c) * P;
              for (std::size_t k = 0; k < K; ++k) {
                const T wv = Wd[c * K + k];
                const T* grow = g + (b * K + k) * P;
                for (std::size_t p = 0; p < P; ++p) gr[p] += wv * grow[p];
              }
            }
        if (T* gw = detail::grad_of<T>(nd, 1))
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T* xr = X + (b * C + c) * P;
              for (std::size_t k = 0; k < K; ++k) {
                const T* grow = g + (b * K + k) * P;
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) acc += xr[p] * grow[p];
                gw[c * K + k] += acc;
              }
            }
      });
}

/// log(softmax(z / temperature)) along the last axis, max-subtracted.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& z, double temperature = 1.0) {
  detail::require_positive_temperature(temperature);
  const std::size_t K = detail::last_dim(z), R = z.size() / K;
  const T inv_t = T(1) / static_cast<T>(temperature);
  std::vector<T> out(z.size());
  for (std::size_t r = 0; r < R; ++r) {
    const T* zr = z.data().data() + r * K;
    T* o = out.data() + r * K;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, zr[k] * inv_t);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(zr[k] * inv_t - mx);
    const T lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) o[k] = zr[k] * inv_t - lse;
  }
  return detail::record<T>("log_softmax", {&z}, Tensor<T>(z.shape(), std::move(out)),
                           [R, K, inv_t](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             const T* y = nd.output->data.data();
                             if (T* gz = detail::grad_of<T>(nd, 0))
                               for (std::size_t r = 0; r < R; ++r) {
                                 T gs = 0;
                                 for (std::size_t k = 0; k < K; ++k) gs += g[r * K + k];
                                 for (std::size_t k = 0; k < K; ++k)
                                   gz[r * K + k] += (g[r * K + k] - std::exp(y[r * K + k]) * gs) * inv_t;
                               }
                           });
}

/// Per-row KL(p || q) from log-probabilities; only log_q receives a gradient.
template <class T>
Tensor<T> kl_divergence_rows(const Tensor<T>& log_p, const Tensor<T>& log_q) {
  detail::require_same_shape(log_p, log_q, "kl_divergence");
  const std::size_t K = detail::last_dim(log_p), R = log_p.size() / K;
  const auto target = log_p.detach();
  std::vector<T> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    T acc = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T lp = target[r * K + k];
      const T p = std::exp(lp);
      if (p > T(0)) acc += p * (lp - log_q[r * K + k]);
    }
    out[r] = acc;
  }
  return detail::record<T>("kl_divergence", {&target, &log_q}, Tensor<T>({R}, std::move(out)),
                           [R, K](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             const T* lp = nd.inputs[0]->data.data();
                             if (T* gq = detail::grad_of<T>(nd, 1))
                               for (std::size_t r = 0; r < R; ++r)
                                 for (std::size_t k = 0; k < K; ++k) gq[r * K + k] -= g[r] * std::exp(lp[r * K + k]);
                           });
}

/// Mean over rows of KL(p || q).
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& log_p, const Tensor<T>& log_q) {
  return mean(kl_divergence_rows(log_p, log_q));
}

/// Row r -> x[r, labels[r]] of an R x K tensor.
template <class T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> labels) {
  const std::size_t K = detail::last_dim(x), R = x.size() / K;
  detail::check_labels(labels, R, K);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<T> out(R);
  for (std::size_t r = 0; r < R; ++r) out[r] = x[r * K + lab[r]];
  return detail::record<T>("pick", {&x}, Tensor<T>({R}, std::move(out)),
                           [R, K, lab](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             if (T* gx = detail::grad_of<T>(nd, 0))
                               for (std::size_t r = 0; r < R; ++r) gx[r * K + lab[r]] += g[r];
                           });
}

/// Removes column labels[r] from row r: R x K -> R x (K-1).
template <class T>
Tensor<T> drop_column(const Tensor<T>& x, std::span<const std::size_t> labels) {
  const std::size_t K = detail::last_dim(x), R = x.size() / K;
  if (K < 2) throw ConfigError("drop_column: need at least 2 classes");
  detail::check_labels(labels, R, K);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<T> out(R * (K - 1));
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (k != lab[r]) out[r * (K - 1) + o++] = x[r * K + k];
  }
  return detail::record<T>("drop_column", {&x}, Tensor<T>({R, K - 1}, std::move(out)),
                           [R, K, lab](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             if (T* gx = detail::grad_of<T>(nd, 0))
                               for (std::size_t r = 0; r < R; ++r) {
                                 std::size_t o = 0;
                                 for (std::size_t k = 0; k < K; ++k)
                                   if (k != lab[r]) gx[r * K + k] += g[r * (K - 1) + o++];
                               }
                           });
}

/// Collapses log-probabilities into the binary {target, rest} log-distribution.
template <class T>
Tensor<T> target_split(const Tensor<T>& log_p, std::span<const std::size_t> labels) {
  const std::size_t K = detail::last_dim(log_p), R = log_p.size() / K;
  if (K < 2) throw ConfigError("target_split: need at least 2 classes");
  detail::check_labels(labels, R, K);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<T> out(R * 2);
  for (std::size_t r = 0; r < R; ++r) {
    const T* lp = log_p.data().data() + r * K;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k)
      if (k != lab[r]) mx = std::max(mx, lp[k]);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (k != lab[r]) s += std::exp(lp[k] - mx);
    out[r * 2] = lp[lab[r]];
    out[r * 2 + 1] = mx + std::log(s);
  }
  return detail::record<T>("target_split", {&log_p}, Tensor<T>({R, 2}, std::move(out)),
                           [R, K, lab](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             const T* y = nd.output->data.data();
                             const T* lp = nd.inputs[0]->data.data();
                             if (T* gl = detail::grad_of<T>(nd, 0))
                               for (std::size_t r = 0; r < R; ++r) {
                                 gl[r * K + lab[r]] += g[r * 2];
                                 for (std::size_t k = 0; k < K; ++k)
                                   if (k != lab[r]) gl[r * K + k] += g[r * 2 + 1] * std::exp(lp[r * K + k] - y[r * 2 + 1]);
                               }
                           });
}

/// Mean negative log-likelihood of the true class at temperature 1.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.ndim() != 2) throw DimensionError("cross_entropy: expected B x K logits, got " + to_string(logits.shape()));
  detail::check_labels(labels, logits.dim(0), logits.dim(1));
  return scale(mean(pick(log_softmax(logits, 1.0), labels)), T(-1));
}

/// Index of the largest value; ties go to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace sdd
