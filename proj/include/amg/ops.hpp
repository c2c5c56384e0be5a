#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "amg/instrument.hpp"
#include "amg/tensor.hpp"

namespace amg {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<std::size_t>(i) * k;
    double* cr = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
inline void mm_acc_at_b(const double* a, const double* g, double* c, int m, int k, int n) {
  for (int p = 0; p < m; ++p) {
    const double* ar = a + static_cast<std::size_t>(p) * k;
    const double* gr = g + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      const double av = ar[i];
      double* cr = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * gr[j];
    }
  }
}

// C[m,k] += G[m,n] * B[k,n]^T
inline void mm_acc_a_bt(const double* g, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* gr = g + static_cast<std::size_t>(i) * n;
    double* cr = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* br = b + static_cast<std::size_t>(p) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gr[j] * br[j];
      cr[p] += dot;
    }
  }
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(s[static_cast<std::size_t>(i) + 1]);
  }
  return st;
}

// Walks every position of `out_shape` and yields (out_linear, src_linear)
// where the source index is the out index with axis0/axis1 swapped.
template <class F>
void for_each_axis_swap(const Shape& out_shape, const std::vector<std::size_t>& src_strides,
                        int axis0, int axis1, F&& f) {
  const int r = static_cast<int>(out_shape.size());
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  const std::size_t total = shape_numel(out_shape);
  for (std::size_t oi = 0; oi < total; ++oi) {
    std::size_t src = 0;
    for (int i = 0; i < r; ++i) {
      int v = idx[static_cast<std::size_t>(i)];
      if (i == axis0) v = idx[static_cast<std::size_t>(axis1)];
      else if (i == axis1) v = idx[static_cast<std::size_t>(axis0)];
      src += static_cast<std::size_t>(v) * src_strides[static_cast<std::size_t>(i)];
    }
    f(oi, src);
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
}

inline bool wants_tape(const Tensor& a) { return Tape::active() && a.requires_grad(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a[... ,m,k] * b[k,n] (shared weight, leading dims folded) or
// a[B...,m,k] * b[B...,k,n] (batched, equal leading dims).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
  }

  const bool grad = Tape::active() && (a.requires_grad() || b.requires_grad());

  if (bs.size() == 2) {
    const int k = as.back();
    const int n = bs[1];
    if (k != bs[0]) {
      throw ShapeError("matmul: inner extents disagree: " + shape_str(as) + " x " + shape_str(bs));
    }
    Shape os(as);
    os.back() = n;
    Tensor out = Tensor::zeros(os);
    const int rows = static_cast<int>(a.numel() / static_cast<std::size_t>(k));
    detail::mm_acc(a.data().data(), b.data().data(), out.data().data(), rows, k, n);
    detail::count_macs(static_cast<long long>(rows) * k * n);
    if (grad) {
      out.set_requires_grad(true);
      Tape::active()->record(out.node, [an = a.node, bn = b.node, on = out.node, rows, k, n] {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
          an->ensure_grad();
          detail::mm_acc_a_bt(on->grad.data(), bn->data.data(), an->grad.data(), rows, n, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::mm_acc_at_b(an->data.data(), on->grad.data(), bn->grad.data(), rows, k, n);
        }
      });
    }
    return out;
  }

  if (as.size() == bs.size()) {
    const std::size_t r = as.size();
    for (std::size_t i = 0; i + 2 < r; ++i) {
      if (as[i] != bs[i]) {
        throw ShapeError("matmul: batch extents disagree: " + shape_str(as) + " x " + shape_str(bs));
      }
    }
    const int m = as[r - 2];
    const int k = as[r - 1];
    const int n = bs[r - 1];
    if (k != bs[r - 2]) {
      throw ShapeError("matmul: inner extents disagree: " + shape_str(as) + " x " + shape_str(bs));
    }
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= static_cast<std::size_t>(as[i]);
    Shape os(as);
    os[r - 1] = n;
    Tensor out = Tensor::zeros(os);
    const std::size_t sa = static_cast<std::size_t>(m) * k;
    const std::size_t sb = static_cast<std::size_t>(k) * n;
    const std::size_t so = static_cast<std::size_t>(m) * n;
    for (std::size_t s = 0; s < batch; ++s) {
      detail::mm_acc(a.data().data() + s * sa, b.data().data() + s * sb,
                     out.data().data() + s * so, m, k, n);
    }
    detail::count_macs(static_cast<long long>(batch) * m * k * n);
    if (grad) {
      out.set_requires_grad(true);
      Tape::active()->record(out.node, [an = a.node, bn = b.node, on = out.node, batch, m, k, n, sa, sb, so] {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t s = 0; s < batch; ++s) {
            detail::mm_acc_a_bt(on->grad.data() + s * so, bn->data.data() + s * sb,
                                an->grad.data() + s * sa, m, n, k);
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t s = 0; s < batch; ++s) {
            detail::mm_acc_at_b(an->data.data() + s * sa, on->grad.data() + s * so,
                                bn->grad.data() + s * sb, m, k, n);
          }
        }
      });
    }
    return out;
  }

  throw ShapeError("matmul: unsupported rank combination " + shape_str(as) + " x " + shape_str(bs));
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

inline Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const int r = x.rank();
  if (axis0 < 0) axis0 += r;
  if (axis1 < 0) axis1 += r;
  if (axis0 < 0 || axis0 >= r || axis1 < 0 || axis1 >= r) {
    throw ShapeError("transpose: axis out of range for " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  std::swap(os[static_cast<std::size_t>(axis0)], os[static_cast<std::size_t>(axis1)]);
  Tensor out = Tensor::zeros(os);
  const auto strides = detail::row_major_strides(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  detail::for_each_axis_swap(os, strides, axis0, axis1,
                             [&](std::size_t oi, std::size_t src) { od[oi] = xd[src]; });
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, os, strides, axis0, axis1] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      detail::for_each_axis_swap(os, strides, axis0, axis1, [&](std::size_t oi, std::size_t src) {
        xn->grad[src] += on->grad[oi];
      });
    });
  }
  return out;
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) { return transpose(x, -2, -1); }

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape);
  out.data() = x.data();
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// Numerically stabilized softmax over the trailing dimension. Rows sum to 1;
// every entry is positive.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError("softmax_rows: need at least one trailing element, got " + shape_str(x.shape()));
  }
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
  }
  const int n = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * static_cast<std::size_t>(n);
    double* o = od.data() + r * static_cast<std::size_t>(n);
    double mx = in[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int j = 0; j < n; ++j) o[j] /= sum;
  }
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, rows, n] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = on->data.data() + r * static_cast<std::size_t>(n);
        const double* gy = on->grad.data() + r * static_cast<std::size_t>(n);
        double* gx = xn->grad.data() + r * static_cast<std::size_t>(n);
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError("log_softmax_rows: need at least one trailing element");
  }
  const int n = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * static_cast<std::size_t>(n);
    double* o = od.data() + r * static_cast<std::size_t>(n);
    double mx = in[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, rows, n] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* o = on->data.data() + r * static_cast<std::size_t>(n);
        const double* gy = on->grad.data() + r * static_cast<std::size_t>(n);
        double* gx = xn->grad.data() + r * static_cast<std::size_t>(n);
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += gy[j];
        for (int j = 0; j < n; ++j) gx[j] += gy[j] - std::exp(o[j]) * gsum;
      }
    });
  }
  return out;
}

// Normalizes the trailing dimension to zero mean and unit variance, then
// applies the learned gain and shift.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const int n = x.shape().back();
  if (static_cast<std::size_t>(n) != gamma.numel() || static_cast<std::size_t>(n) != beta.numel()) {
    throw ShapeError("layernorm: gain/shift length must match trailing extent " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * static_cast<std::size_t>(n);
    double* o = od.data() + r * static_cast<std::size_t>(n);
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += in[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) o[j] = (in[j] - mean) * inv * gd[j] + bd[j];
  }
  const bool grad = Tape::active() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (grad) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, gn = gamma.node, bn = beta.node,
                                      on = out.node, rows, n, eps] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      std::vector<double> xhat(static_cast<std::size_t>(n));
      for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xn->data.data() + r * static_cast<std::size_t>(n);
        const double* gy = on->grad.data() + r * static_cast<std::size_t>(n);
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += in[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) xhat[static_cast<std::size_t>(j)] = (in[j] - mean) * inv;
        if (gn->requires_grad) {
          for (int j = 0; j < n; ++j) gn->grad[static_cast<std::size_t>(j)] += gy[j] * xhat[static_cast<std::size_t>(j)];
        }
        if (bn->requires_grad) {
          for (int j = 0; j < n; ++j) bn->grad[static_cast<std::size_t>(j)] += gy[j];
        }
        if (xn->requires_grad) {
          double* gx = xn->grad.data() + r * static_cast<std::size_t>(n);
          double g_mean = 0.0, gx_mean = 0.0;
          for (int j = 0; j < n; ++j) {
            const double g = gy[j] * gn->data[static_cast<std::size_t>(j)];
            g_mean += g;
            gx_mean += g * xhat[static_cast<std::size_t>(j)];
          }
          g_mean /= n;
          gx_mean /= n;
          for (int j = 0; j < n; ++j) {
            const double g = gy[j] * gn->data[static_cast<std::size_t>(j)];
            gx[j] += (g - g_mean - xhat[static_cast<std::size_t>(j)] * gx_mean) * inv;
          }
        }
      }
    });
  }
  return out;
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::acos(-1.0));
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    od[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
  }
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->data.size(); ++i) {
        const double v = xn->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xn->grad[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  }
  return true;
}
}  // namespace detail

// a + b; b may be a trailing-shape slice broadcast over a's leading dims
// (bias over rows, position table over the batch).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  if (!same && !detail::is_suffix(b.shape(), a.shape())) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are neither equal nor trailing-broadcastable");
  }
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t bn = b.numel();
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] + bd[i % bn];
  const bool grad = Tape::active() && (a.requires_grad() || b.requires_grad());
  if (grad) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [an = a.node, bn2 = b.node, on = out.node, bn] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn2->requires_grad) {
        bn2->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn2->grad[i % bn] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  const bool grad = Tape::active() && (a.requires_grad() || b.requires_grad());
  if (grad) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [an = a.node, bn = b.node, on = out.node] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = x.data()[i] * s;
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, s] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      const double g = on->grad[0];
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// indexed selection
// ---------------------------------------------------------------------------

// Selects slices along `axis` in the given order. An identity index list
// reproduces the input bit for bit.
inline Tensor gather(const Tensor& x, int axis, const std::vector<int>& indices) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("gather: axis out of range for " + shape_str(x.shape()));
  if (indices.empty()) throw ContractError("gather: empty index list");
  const int extent = x.shape()[static_cast<std::size_t>(axis)];
  for (int idx : indices) {
    if (idx < 0 || idx >= extent) {
      throw ContractError("gather: index " + std::to_string(idx) + " out of range [0," +
                          std::to_string(extent) + ")");
    }
  }
  Shape os = x.shape();
  os[static_cast<std::size_t>(axis)] = static_cast<int>(indices.size());
  Tensor out = Tensor::zeros(os);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  const std::size_t m = indices.size();
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::memcpy(od.data() + (o * m + j) * inner,
                  xd.data() + (o * static_cast<std::size_t>(extent) + static_cast<std::size_t>(indices[j])) * inner,
                  inner * sizeof(double));
    }
  }
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, indices, outer, inner, m, extent] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
          const double* src = on->grad.data() + (o * m + j) * inner;
          double* dst = xn->grad.data() +
                        (o * static_cast<std::size_t>(extent) + static_cast<std::size_t>(indices[j])) * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

inline Tensor gather_columns(const Tensor& x, const std::vector<int>& indices) {
  return gather(x, x.rank() - 1, indices);
}

// tok[D] broadcast to position 0 of every sample: [B,N,D] -> [B,N+1,D].
inline Tensor prepend_token(const Tensor& tok, const Tensor& x) {
  if (x.rank() != 3 || tok.rank() != 1 || tok.dim(0) != x.dim(2)) {
    throw ShapeError("prepend_token: expected tok[D] and x[B,N,D], got " + shape_str(tok.shape()) +
                     " and " + shape_str(x.shape()));
  }
  const int B = x.dim(0), N = x.dim(1), D = x.dim(2);
  Tensor out = Tensor::zeros({B, N + 1, D});
  const auto& td = tok.data();
  const auto& xd = x.data();
  auto& od = out.data();
  for (int b = 0; b < B; ++b) {
    double* base = od.data() + static_cast<std::size_t>(b) * (N + 1) * D;
    std::memcpy(base, td.data(), static_cast<std::size_t>(D) * sizeof(double));
    std::memcpy(base + D, xd.data() + static_cast<std::size_t>(b) * N * D,
                static_cast<std::size_t>(N) * D * sizeof(double));
  }
  const bool grad = Tape::active() && (tok.requires_grad() || x.requires_grad());
  if (grad) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [tn = tok.node, xn = x.node, on = out.node, B, N, D] {
      if (on->grad.empty()) return;
      if (tn->requires_grad) {
        tn->ensure_grad();
        for (int b = 0; b < B; ++b) {
          const double* g = on->grad.data() + static_cast<std::size_t>(b) * (N + 1) * D;
          for (int j = 0; j < D; ++j) tn->grad[static_cast<std::size_t>(j)] += g[j];
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int b = 0; b < B; ++b) {
          const double* g = on->grad.data() + static_cast<std::size_t>(b) * (N + 1) * D + D;
          double* dst = xn->grad.data() + static_cast<std::size_t>(b) * N * D;
          for (std::size_t i = 0; i < static_cast<std::size_t>(N) * D; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

// x[B,N,D] -> x[:,t,:] as [B,D].
inline Tensor select_token(const Tensor& x, int token) {
  if (x.rank() != 3) throw ShapeError("select_token: expected [B,N,D], got " + shape_str(x.shape()));
  const int B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (token < 0 || token >= N) throw ContractError("select_token: index out of range");
  Tensor out = Tensor::zeros({B, D});
  for (int b = 0; b < B; ++b) {
    std::memcpy(out.data().data() + static_cast<std::size_t>(b) * D,
                x.data().data() + (static_cast<std::size_t>(b) * N + static_cast<std::size_t>(token)) * D,
                static_cast<std::size_t>(D) * sizeof(double));
  }
  if (detail::wants_tape(x)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = x.node, on = out.node, B, N, D, token] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const double* g = on->grad.data() + static_cast<std::size_t>(b) * D;
        double* dst = xn->grad.data() + (static_cast<std::size_t>(b) * N + static_cast<std::size_t>(token)) * D;
        for (int j = 0; j < D; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// img[B,C,S,S] -> patches[B, (S/p)^2, C*p*p], grid scanned row-major and each
// patch flattened channel-major.
inline Tensor extract_patches(const Tensor& img, int patch) {
  if (img.rank() != 4) throw ShapeError("extract_patches: expected [B,C,H,W], got " + shape_str(img.shape()));
  const int B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  if (H != W || patch <= 0 || H % patch != 0) {
    throw ShapeError("extract_patches: image " + shape_str(img.shape()) +
                     " not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  const int g = H / patch;
  const int np = g * g;
  const int pd = C * patch * patch;
  Tensor out = Tensor::zeros({B, np, pd});
  const auto& id = img.data();
  auto& od = out.data();
  auto src_off = [&](int b, int c, int y, int x) {
    return ((static_cast<std::size_t>(b) * C + c) * H + y) * W + x;
  };
  for (int b = 0; b < B; ++b) {
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx) {
        double* dst = od.data() + (static_cast<std::size_t>(b) * np + gy * g + gx) * pd;
        int w = 0;
        for (int c = 0; c < C; ++c) {
          for (int py = 0; py < patch; ++py) {
            for (int px = 0; px < patch; ++px) {
              dst[w++] = id[src_off(b, c, gy * patch + py, gx * patch + px)];
            }
          }
        }
      }
    }
  }
  if (detail::wants_tape(img)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [xn = img.node, on = out.node, B, C, H, W, patch, g, np, pd] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      auto src_off2 = [&](int b, int c, int y, int x) {
        return ((static_cast<std::size_t>(b) * C + c) * H + y) * W + x;
      };
      for (int b = 0; b < B; ++b) {
        for (int gy = 0; gy < g; ++gy) {
          for (int gx = 0; gx < g; ++gx) {
            const double* gsrc = on->grad.data() + (static_cast<std::size_t>(b) * np + gy * g + gx) * pd;
            int w = 0;
            for (int c = 0; c < C; ++c) {
              for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                  xn->grad[src_off2(b, c, gy * patch + py, gx * patch + px)] += gsrc[w++];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over a batch of logit rows against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: expected [B,C] logits, got " + shape_str(logits.shape()));
  }
  const int B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw ContractError("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || y >= C) throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range");
  }
  double total = 0.0;
  const auto& zd = logits.data();
  for (int b = 0; b < B; ++b) {
    const double* z = zd.data() + static_cast<std::size_t>(b) * C;
    double mx = z[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(z[c] - mx);
    total += mx + std::log(sum) - z[labels[static_cast<std::size_t>(b)]];
  }
  Tensor out = Tensor::scalar(total / B);
  if (detail::wants_tape(logits)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [zn = logits.node, on = out.node, labels, B, C] {
      if (on->grad.empty() || !zn->requires_grad) return;
      zn->ensure_grad();
      const double go = on->grad[0];
      for (int b = 0; b < B; ++b) {
        const double* z = zn->data.data() + static_cast<std::size_t>(b) * C;
        double* gz = zn->grad.data() + static_cast<std::size_t>(b) * C;
        double mx = z[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, z[c]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(z[c] - mx);
        for (int c = 0; c < C; ++c) {
          const double p = std::exp(z[c] - mx) / sum;
          gz[c] += go * (p - (c == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0)) / B;
        }
      }
    });
  }
  return out;
}

// KL(q || p) from log-probabilities of p and probabilities q, averaged over
// rows. Zero-probability reference entries contribute nothing.
inline Tensor kl_divergence(const Tensor& p_log, const Tensor& q) {
  if (p_log.shape() != q.shape()) {
    throw ShapeError("kl_divergence: shapes " + shape_str(p_log.shape()) + " and " +
                     shape_str(q.shape()) + " differ");
  }
  if (p_log.rank() < 1) throw ShapeError("kl_divergence: need at least rank 1");
  const int C = p_log.shape().back();
  const std::size_t rows = p_log.numel() / static_cast<std::size_t>(C);
  double total = 0.0;
  for (std::size_t i = 0; i < p_log.numel(); ++i) {
    const double qi = q.data()[i];
    if (qi > 0.0) total += qi * (std::log(qi) - p_log.data()[i]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  const bool grad = Tape::active() && (p_log.requires_grad() || q.requires_grad());
  if (grad) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node, [pn = p_log.node, qn = q.node, on = out.node, rows] {
      if (on->grad.empty()) return;
      const double go = on->grad[0] / static_cast<double>(rows);
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (std::size_t i = 0; i < pn->data.size(); ++i) {
          const double qi = qn->data[i];
          if (qi > 0.0) pn->grad[i] -= go * qi;
        }
      }
      if (qn->requires_grad) {
        qn->ensure_grad();
        for (std::size_t i = 0; i < qn->data.size(); ++i) {
          const double qi = qn->data[i];
          if (qi > 0.0) qn->grad[i] += go * (std::log(qi) - pn->data[i] + 1.0);
        }
      }
    });
  }
  return out;
}

}  // namespace amg
