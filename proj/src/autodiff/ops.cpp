#include "mllmreid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mllmreid/error.hpp"
#include "mllmreid/kernels.hpp"

namespace mllmreid::ad {
namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

TensorImpl& in(const TensorImpl& out, std::size_t i) { return *out.node->inputs[i]; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  kernels::gemm(m, n, k, a.data().data(), k, false, b.data().data(), n, false, c.data(), n);
  return make_op("matmul", {a, b}, {m, n}, std::move(c), [m, n, k](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    TensorImpl& tb = in(out, 1);
    if (ta.requires_grad)  // dA += dC * B^T
      kernels::gemm(m, k, n, out.grad.data(), n, false, tb.data.data(), n, true, ta.grad.data(), k);
    if (tb.requires_grad)  // dB += A^T * dC
      kernels::gemm(k, n, m, ta.data.data(), k, true, out.grad.data(), n, false, tb.grad.data(), n);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (b.numel() != n) throw ShapeError("linear: bias " + shape_str(b.shape()) + " for output width " + std::to_string(n));
  std::vector<double> c(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), c.begin() + i * n);
  kernels::gemm(m, n, k, x.data().data(), k, false, w.data().data(), n, false, c.data(), n);
  return make_op("linear", {x, w, b}, {m, n}, std::move(c), [m, n, k](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    TensorImpl& tw = in(out, 1);
    TensorImpl& tb = in(out, 2);
    if (tx.requires_grad)
      kernels::gemm(m, k, n, out.grad.data(), n, false, tw.data.data(), n, true, tx.grad.data(), k);
    if (tw.requires_grad)
      kernels::gemm(k, n, m, tx.data.data(), k, true, out.grad.data(), n, false, tw.grad.data(), n);
    if (tb.requires_grad) {
      for (std::size_t i = 0; i < m; ++i) kernels::active().axpy(1.0, out.grad.data() + i * n, tb.grad.data(), n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> o(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = a.data()[i * c + j];
  return make_op("transpose", {a}, {c, r}, std::move(o), [r, c](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ta.grad[i * c + j] += out.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> o(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += b.data()[i];
  return make_op("add", {a, b}, a.shape(), std::move(o), [](const TensorImpl& out) {
    for (std::size_t k = 0; k < 2; ++k) {
      TensorImpl& t = in(out, k);
      if (t.requires_grad) kernels::active().axpy(1.0, out.grad.data(), t.grad.data(), out.grad.size());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> o(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= b.data()[i];
  return make_op("sub", {a, b}, a.shape(), std::move(o), [](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    TensorImpl& tb = in(out, 1);
    if (ta.requires_grad) kernels::active().axpy(1.0, out.grad.data(), ta.grad.data(), out.grad.size());
    if (tb.requires_grad) kernels::active().axpy(-1.0, out.grad.data(), tb.grad.data(), out.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> o(a.numel());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  return make_op("mul", {a, b}, a.shape(), std::move(o), [](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    TensorImpl& tb = in(out, 1);
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (ta.requires_grad) ta.grad[i] += out.grad[i] * tb.data[i];
      if (tb.requires_grad) tb.grad[i] += out.grad[i] * ta.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> o(a.data().begin(), a.data().end());
  for (double& v : o) v *= s;
  return make_op("scale", {a}, a.shape(), std::move(o), [s](const TensorImpl& out) {
    kernels::active().axpy(s, out.grad.data(), in(out, 0).grad.data(), out.grad.size());
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> o(a.data().begin(), a.data().end());
  for (double& v : o) v += s;
  return make_op("add_scalar", {a}, a.shape(), std::move(o), [](const TensorImpl& out) {
    kernels::active().axpy(1.0, out.grad.data(), in(out, 0).grad.data(), out.grad.size());
  });
}

Tensor add_tiled(const Tensor& x, const Tensor& t) {
  require_2d(x, "add_tiled");
  require_2d(t, "add_tiled");
  const std::size_t n = x.dim(0), d = x.dim(1), m = t.dim(0);
  if (t.dim(1) != d || m == 0 || n % m != 0) {
    throw ShapeError("add_tiled: cannot tile " + shape_str(t.shape()) + " over " + shape_str(x.shape()));
  }
  std::vector<double> o(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) o[r * d + c] += t.data()[(r % m) * d + c];
  return make_op("add_tiled", {x, t}, x.shape(), std::move(o), [n, d, m](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    TensorImpl& tt = in(out, 1);
    if (tx.requires_grad) kernels::active().axpy(1.0, out.grad.data(), tx.grad.data(), out.grad.size());
    if (tt.requires_grad) {
      for (std::size_t r = 0; r < n; ++r)
        kernels::active().axpy(1.0, out.grad.data() + r * d, tt.grad.data() + (r % m) * d, d);
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {a}, {1}, {s}, [](const TensorImpl& out) {
    const double g = out.grad[0];
    for (double& v : in(out, 0).grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_op("mean", {a}, {1}, {s / n}, [n](const TensorImpl& out) {
    const double g = out.grad[0] / n;
    for (double& v : in(out, 0).grad) v += g;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> o(a.numel());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op("relu", {a}, a.shape(), std::move(o), [](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      if (ta.data[i] > 0.0) ta.grad[i] += out.grad[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> o(a.numel());
  std::vector<double> t(a.numel());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = a.data()[i];
    t[i] = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    o[i] = 0.5 * x * (1.0 + t[i]);
  }
  return make_op("gelu", {a}, a.shape(), std::move(o), [t = std::move(t)](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      const double x = ta.data[i];
      const double dt = (1.0 - t[i] * t[i]) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ta.grad[i] += out.grad[i] * (0.5 * (1.0 + t[i]) + 0.5 * x * dt);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ValueError("layer_norm: eps must be positive");
  const std::size_t d = last_dim(x);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " for feature width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> o(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * rstd[r];
      o[r * d + c] = xhat[r * d + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return make_op("layer_norm", {x, gamma, beta}, x.shape(), std::move(o),
                 [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const TensorImpl& out) {
                   TensorImpl& tx = in(out, 0);
                   TensorImpl& tg = in(out, 1);
                   TensorImpl& tb = in(out, 2);
                   std::vector<double> dxhat(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gy = out.grad.data() + r * d;
                     const double* xh = xhat.data() + r * d;
                     double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                     for (std::size_t c = 0; c < d; ++c) {
                       dxhat[c] = gy[c] * tg.data[c];
                       mean_dxhat += dxhat[c];
                       mean_dxhat_xhat += dxhat[c] * xh[c];
                       if (tg.requires_grad) tg.grad[c] += gy[c] * xh[c];
                       if (tb.requires_grad) tb.grad[c] += gy[c];
                     }
                     if (!tx.requires_grad) continue;
                     mean_dxhat /= static_cast<double>(d);
                     mean_dxhat_xhat /= static_cast<double>(d);
                     for (std::size_t c = 0; c < d; ++c)
                       tx.grad[r * d + c] += rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                   }
                 });
}

Tensor attention(const Tensor& qkv, std::size_t seq_len, std::size_t heads, bool causal) {
  require_2d(qkv, "attention");
  const std::size_t rows = qkv.dim(0);
  if (qkv.dim(1) % 3 != 0) throw ShapeError("attention: qkv width must be 3*d, got " + shape_str(qkv.shape()));
  const std::size_t d = qkv.dim(1) / 3;
  if (seq_len == 0 || rows % seq_len != 0) {
    throw ShapeError("attention: " + std::to_string(rows) + " rows is not a multiple of seq_len " +
                     std::to_string(seq_len));
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: heads must divide d=" + std::to_string(d));
  const std::size_t batch = rows / seq_len, hd = d / heads, L = seq_len, w = 3 * d;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto& kt = kernels::active();

  std::vector<double> o(rows * d, 0.0);
  std::vector<double> probs(batch * heads * L * L, 0.0);
  std::vector<double> q(L * hd), k(L * hd), v(L * hd), ob(L * hd);
  const double* src = qkv.data().data();

  auto unpack = [&](std::size_t b, std::size_t h) {
    for (std::size_t i = 0; i < L; ++i) {
      const double* row = src + (b * L + i) * w + h * hd;
      std::copy(row, row + hd, q.begin() + i * hd);
      std::copy(row + d, row + d + hd, k.begin() + i * hd);
      std::copy(row + 2 * d, row + 2 * d + hd, v.begin() + i * hd);
    }
  };

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      unpack(b, h);
      double* p = probs.data() + (b * heads + h) * L * L;
      kernels::gemm(L, L, hd, q.data(), hd, false, k.data(), hd, true, p, L);
      for (std::size_t i = 0; i < L; ++i) {
        double* pr = p + i * L;
        const std::size_t lim = causal ? i + 1 : L;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lim; ++j) {
          pr[j] *= sc;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        for (std::size_t j = 0; j < lim; ++j) pr[j] /= z;
        for (std::size_t j = lim; j < L; ++j) pr[j] = 0.0;
      }
      std::fill(ob.begin(), ob.end(), 0.0);
      kt.gemm_nn(L, hd, L, p, L, 1, v.data(), hd, ob.data(), hd);
      for (std::size_t i = 0; i < L; ++i)
        std::copy(ob.begin() + i * hd, ob.begin() + (i + 1) * hd, o.begin() + (b * L + i) * d + h * hd);
    }
  }

  return make_op(
      "attention", {qkv}, {rows, d}, std::move(o),
      [batch, heads, L, d, hd, w, sc, probs = std::move(probs)](const TensorImpl& out) {
        TensorImpl& tin = in(out, 0);
        const auto& kt = kernels::active();
        std::vector<double> q(L * hd), k(L * hd), v(L * hd), dout(L * hd);
        std::vector<double> dq(L * hd), dk(L * hd), dv(L * hd), dp(L * L);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
              const double* row = tin.data.data() + (b * L + i) * w + h * hd;
              std::copy(row, row + hd, q.begin() + i * hd);
              std::copy(row + d, row + d + hd, k.begin() + i * hd);
              std::copy(row + 2 * d, row + 2 * d + hd, v.begin() + i * hd);
              const double* g = out.grad.data() + (b * L + i) * d + h * hd;
              std::copy(g, g + hd, dout.begin() + i * hd);
            }
            const double* p = probs.data() + (b * heads + h) * L * L;
            std::fill(dv.begin(), dv.end(), 0.0);
            std::fill(dp.begin(), dp.end(), 0.0);
            std::fill(dq.begin(), dq.end(), 0.0);
            std::fill(dk.begin(), dk.end(), 0.0);
            kernels::gemm(L, hd, L, p, L, true, dout.data(), hd, false, dv.data(), hd);   // P^T dO
            kernels::gemm(L, L, hd, dout.data(), hd, false, v.data(), hd, true, dp.data(), L);  // dO V^T
            for (std::size_t i = 0; i < L; ++i) {
              const double* pr = p + i * L;
              double* dr = dp.data() + i * L;
              const double inner = kt.dot(pr, dr, L);
              for (std::size_t j = 0; j < L; ++j) dr[j] = pr[j] * (dr[j] - inner) * sc;
            }
            kt.gemm_nn(L, hd, L, dp.data(), L, 1, k.data(), hd, dq.data(), hd);               // dS K
            kernels::gemm(L, hd, L, dp.data(), L, true, q.data(), hd, false, dk.data(), hd);  // dS^T Q
            for (std::size_t i = 0; i < L; ++i) {
              double* row = tin.grad.data() + (b * L + i) * w + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                row[c] += dq[i * hd + c];
                row[d + c] += dk[i * hd + c];
                row[2 * d + c] += dv[i * hd + c];
              }
            }
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::span<const double> weights) {
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), C = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  if (!weights.empty() && weights.size() != n) {
    throw ShapeError("softmax_cross_entropy: mask length " + std::to_string(weights.size()) + " for " +
                     std::to_string(n) + " rows");
  }
  std::vector<double> w(n, 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] < 0.0) throw ValueError("softmax_cross_entropy: negative row weight");
    if (w[i] == 0.0) continue;
    if (targets[i] >= C) {
      throw ValueError("softmax_cross_entropy: target " + std::to_string(targets[i]) + " out of range [0," +
                       std::to_string(C) + ")");
    }
    wsum += w[i];
  }
  if (wsum == 0.0) throw ValueError("softmax_cross_entropy: mask selects no rows");

  std::vector<double> probs(n * C, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    const double* l = logits.data().data() + i * C;
    const double mx = *std::max_element(l, l + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(l[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) probs[i * C + c] = std::exp(l[c] - lse);
    total += w[i] * (lse - l[targets[i]]);
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_op("softmax_cross_entropy", {logits}, {1}, {total / wsum},
                 [n, C, wsum, w = std::move(w), tgt = std::move(tgt), probs = std::move(probs)](const TensorImpl& out) {
                   TensorImpl& tl = in(out, 0);
                   const double g = out.grad[0];
                   for (std::size_t i = 0; i < n; ++i) {
                     if (w[i] == 0.0) continue;
                     const double f = g * w[i] / wsum;
                     for (std::size_t c = 0; c < C; ++c) tl.grad[i * C + c] += f * probs[i * C + c];
                     tl.grad[i * C + tgt[i]] -= f;
                   }
                 });
}

Tensor embedding(const Tensor& weight, std::span<const std::size_t> ids) {
  require_2d(weight, "embedding");
  const std::size_t V = weight.dim(0), d = weight.dim(1);
  std::vector<double> o(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) throw ValueError("embedding: id " + std::to_string(ids[i]) + " >= vocab " + std::to_string(V));
    std::copy_n(weight.data().begin() + ids[i] * d, d, o.begin() + i * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return make_op("embedding", {weight}, {ids.size(), d}, std::move(o), [d, idv = std::move(idv)](const TensorImpl& out) {
    TensorImpl& tw = in(out, 0);
    for (std::size_t i = 0; i < idv.size(); ++i)
      kernels::active().axpy(1.0, out.grad.data() + i * d, tw.grad.data() + idv[i] * d, d);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> o(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of " + std::to_string(n));
    std::copy_n(x.data().begin() + rows[i] * d, d, o.begin() + i * d);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return make_op("gather_rows", {x}, {rows.size(), d}, std::move(o), [d, rv = std::move(rv)](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    for (std::size_t i = 0; i < rv.size(); ++i)
      kernels::active().axpy(1.0, out.grad.data() + i * d, tx.grad.data() + rv[i] * d, d);
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_2d(x, "slice_rows");
  const std::size_t d = x.dim(1);
  if (begin + count > x.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") out of " +
                     std::to_string(x.dim(0)) + " rows");
  }
  std::vector<double> o(x.data().begin() + begin * d, x.data().begin() + (begin + count) * d);
  return make_op("slice_rows", {x}, {count, d}, std::move(o), [begin, d](const TensorImpl& out) {
    kernels::active().axpy(1.0, out.grad.data(), in(out, 0).grad.data() + begin * d, out.grad.size());
  });
}

Tensor replace_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& src) {
  require_2d(base, "replace_rows");
  require_2d(src, "replace_rows");
  const std::size_t n = base.dim(0), d = base.dim(1);
  if (src.dim(1) != d || src.dim(0) != rows.size()) {
    throw ShapeError("replace_rows: " + std::to_string(rows.size()) + " rows from source " + shape_str(src.shape()) +
                     " into " + shape_str(base.shape()));
  }
  std::vector<double> o(base.data().begin(), base.data().end());
  std::vector<char> replaced(n, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("replace_rows: row " + std::to_string(rows[i]) + " out of " + std::to_string(n));
    if (replaced[rows[i]]) throw ValueError("replace_rows: row " + std::to_string(rows[i]) + " listed twice");
    replaced[rows[i]] = 1;
    std::copy_n(src.data().begin() + i * d, d, o.begin() + rows[i] * d);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return make_op("replace_rows", {base, src}, base.shape(), std::move(o),
                 [n, d, rv = std::move(rv), replaced = std::move(replaced)](const TensorImpl& out) {
                   TensorImpl& tb = in(out, 0);
                   TensorImpl& ts = in(out, 1);
                   if (tb.requires_grad) {
                     for (std::size_t r = 0; r < n; ++r)
                       if (!replaced[r]) kernels::active().axpy(1.0, out.grad.data() + r * d, tb.grad.data() + r * d, d);
                   }
                   if (ts.requires_grad) {
                     for (std::size_t i = 0; i < rv.size(); ++i)
                       kernels::active().axpy(1.0, out.grad.data() + rv[i] * d, ts.grad.data() + i * d, d);
                   }
                 });
}

Tensor mean_rows_grouped(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  require_2d(x, "mean_rows_grouped");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> o(groups.size() * d, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw ValueError("mean_rows_grouped: group " + std::to_string(g) + " is empty");
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t r : groups[g]) {
      if (r >= n) throw ShapeError("mean_rows_grouped: row " + std::to_string(r) + " out of " + std::to_string(n));
      kernels::active().axpy(inv, x.data().data() + r * d, o.data() + g * d, d);
    }
  }
  return make_op("mean_rows_grouped", {x}, {groups.size(), d}, std::move(o), [d, groups](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double inv = 1.0 / static_cast<double>(groups[g].size());
      for (std::size_t r : groups[g]) kernels::active().axpy(inv, out.grad.data() + g * d, tx.grad.data() + r * d, d);
    }
  });
}

Tensor pairwise_distance(const Tensor& a, const Tensor& b) {
  require_2d(a, "pairwise_distance");
  require_2d(b, "pairwise_distance");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) {
    throw ShapeError("pairwise_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& kt = kernels::active();
  std::vector<double> o(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double sq = kt.sq_dist(a.data().data() + i * d, b.data().data() + j * d, d);
      o[i * m + j] = sq > 0.0 ? std::sqrt(sq) : 0.0;
    }
  return make_op("pairwise_distance", {a, b}, {n, m}, std::move(o), [n, m, d](const TensorImpl& out) {
    TensorImpl& ta = in(out, 0);
    TensorImpl& tb = in(out, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double dist = out.data[i * m + j];
        const double g = out.grad[i * m + j];
        if (dist == 0.0 || g == 0.0) continue;
        const double f = g / dist;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = ta.data[i * d + c] - tb.data[j * d + c];
          if (ta.requires_grad) ta.grad[i * d + c] += f * diff;
          if (tb.requires_grad) tb.grad[j * d + c] -= f * diff;
        }
      }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_2d(x, "l2_normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> o(x.numel());
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data().data() + r * d;
    norms[r] = std::max(std::sqrt(kernels::active().dot(xr, xr, d)), eps);
    for (std::size_t c = 0; c < d; ++c) o[r * d + c] = xr[c] / norms[r];
  }
  return make_op("l2_normalize_rows", {x}, x.shape(), std::move(o), [n, d, norms = std::move(norms)](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = out.data.data() + r * d;
      const double* g = out.grad.data() + r * d;
      const double proj = kernels::active().dot(y, g, d);
      for (std::size_t c = 0; c < d; ++c) tx.grad[r * d + c] += (g[c] - y[c] * proj) / norms[r];
    }
  });
}

Tensor gather_elements(const Tensor& x, std::span<const std::size_t> flat_indices) {
  std::vector<double> o(flat_indices.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (flat_indices[i] >= x.numel()) throw ShapeError("gather_elements: index out of range");
    o[i] = x.data()[flat_indices[i]];
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  const std::size_t count = idx.size();
  return make_op("gather_elements", {x}, {count}, std::move(o), [idx = std::move(idx)](const TensorImpl& out) {
    TensorImpl& tx = in(out, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) tx.grad[idx[i]] += out.grad[i];
  });
}

}  // namespace mllmreid::ad
