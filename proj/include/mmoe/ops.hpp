#pragma once

// Differentiable tensor operations. Every op validates its inputs, produces a
// fresh output tensor, rejects non-finite results, and records its backward
// rule on the active GradTape when any input requires a gradient.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmoe/tensor.hpp"

namespace mmoe {

inline constexpr double kNormEpsilon = 1e-6;

namespace detail {

inline Tensor make_output(Shape shape, std::vector<double> data, const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tensor out(std::move(node));
  out.check_finite(op);
  return out;
}

// Returns the gradient buffer of `t` if gradients flow into it, else nullptr.
inline std::vector<double>* grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return &t.node()->grad;
}

template <typename Fn>
void track(Tensor& out, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
  auto* tape = GradTape::current();
  if (!tape) return;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  tape->record(out, std::forward<Fn>(fn));
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2)
    throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Tensor res = detail::make_output({m, n}, std::move(out), "matmul");
  detail::track(res, {&a, &b}, [a, b, m, k, n](std::span<const double> g) {
    auto A = a.data();
    auto B = b.data();
    if (auto* ga = detail::grad_sink(a)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          (*ga)[i * k + p] += s;
        }
    }
    if (auto* gb = detail::grad_sink(b)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          double* dst = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += av * g[i * n + j];
        }
    }
  });
  return res;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_2d(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  auto X = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = X[i * c + j];
  Tensor res = detail::make_output({c, r}, std::move(out), "transpose");
  detail::track(res, {&x}, [x, r, c](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[j * r + i];
  });
  return res;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor res = detail::make_output(std::move(shape), {x.data().begin(), x.data().end()}, "reshape");
  detail::track(res, {&x}, [x](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
  return res;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor res = detail::make_output(a.shape(), std::move(out), "add");
  detail::track(res, {&a, &b}, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
  return res;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor res = detail::make_output(a.shape(), std::move(out), "sub");
  detail::track(res, {&a, &b}, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
  return res;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor res = detail::make_output(a.shape(), std::move(out), "mul");
  detail::track(res, {&a, &b}, [a, b](std::span<const double> g) {
    if (auto* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
    if (auto* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
  });
  return res;
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  Tensor res = detail::make_output(x.shape(), std::move(out), "scale");
  detail::track(res, {&x}, [x, s](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * s;
  });
  return res;
}

// x[..., n] + bias[n], broadcast over leading dimensions.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                     shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  Tensor res = detail::make_output(x.shape(), std::move(out), "add_bias");
  detail::track(res, {&x, &bias}, [x, bias, n](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (auto* gb = detail::grad_sink(bias))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % n] += g[i];
  });
  return res;
}

// Row r of x[R x C] multiplied by w[r].
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_2d(x, "scale_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (w.numel() != r)
    throw ShapeError("scale_rows: " + std::to_string(w.numel()) + " weights for " +
                     std::to_string(r) + " rows");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * w[i];
  Tensor res = detail::make_output(x.shape(), std::move(out), "scale_rows");
  detail::track(res, {&x, &w}, [x, w, r, c](std::span<const double> g) {
    if (auto* gx = detail::grad_sink(x))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[i * c + j] * w[i];
    if (auto* gw = detail::grad_sink(w))
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * x[i * c + j];
        (*gw)[i] += s;
      }
  });
  return res;
}

inline Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  Tensor res = detail::make_output(x.shape(), std::move(out), "silu");
  detail::track(res, {&x}, [x](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      (*gx)[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
  return res;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor res = detail::make_output({1}, {s}, "sum");
  detail::track(res, {&x}, [x](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (auto& v : *gx) v += g[0];
  });
  return res;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor softmax(const Tensor& x, int axis) {
  const int nd = static_cast<int>(x.dim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  const auto& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[i];
  for (int i = axis + 1; i < nd; ++i) inner *= sh[i];
  const std::size_t n = sh[axis];
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto idx = [&](std::size_t k) { return (o * n + k) * inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[idx(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) z += (out[idx(k)] = std::exp(x[idx(k)] - mx));
      for (std::size_t k = 0; k < n; ++k) out[idx(k)] /= z;
    }
  Tensor res = detail::make_output(sh, std::move(out), "softmax");
  std::weak_ptr<detail::Node> self = res.node();
  detail::track(res, {&x}, [x, self, outer, inner, n](std::span<const double> g) {
    const auto& y = self.lock()->data;
    auto* gx = detail::grad_sink(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        auto idx = [&](std::size_t k) { return (o * n + k) * inner + in; };
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[idx(k)] * y[idx(k)];
        for (std::size_t k = 0; k < n; ++k) (*gx)[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
      }
  });
  return res;
}

// Row-wise softmax over x[T x S] where row r only sees columns c <= r + offset.
// Masked entries are exactly zero and carry no gradient.
inline Tensor causal_softmax(const Tensor& x, std::size_t offset = 0) {
  detail::require_2d(x, "causal_softmax");
  const std::size_t t = x.rows(), s = x.cols();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < t; ++r) {
    const std::size_t lim = std::min(s, r + offset + 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lim; ++c) mx = std::max(mx, x[r * s + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < lim; ++c) z += (out[r * s + c] = std::exp(x[r * s + c] - mx));
    for (std::size_t c = 0; c < lim; ++c) out[r * s + c] /= z;
  }
  Tensor res = detail::make_output(x.shape(), std::move(out), "causal_softmax");
  std::weak_ptr<detail::Node> self = res.node();
  detail::track(res, {&x}, [x, self, t, s, offset](std::span<const double> g) {
    const auto& y = self.lock()->data;
    auto* gx = detail::grad_sink(x);
    for (std::size_t r = 0; r < t; ++r) {
      const std::size_t lim = std::min(s, r + offset + 1);
      double dot = 0.0;
      for (std::size_t c = 0; c < lim; ++c) dot += g[r * s + c] * y[r * s + c];
      for (std::size_t c = 0; c < lim; ++c) (*gx)[r * s + c] += y[r * s + c] * (g[r * s + c] - dot);
    }
  });
  return res;
}

// log(sum_j exp(x[r, j])) per row, shift-stable.
inline Tensor logsumexp_rows(const Tensor& x) {
  detail::require_2d(x, "logsumexp_rows");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
    out[i] = mx + std::log(z);
  }
  Tensor res = detail::make_output({r}, std::move(out), "logsumexp_rows");
  std::weak_ptr<detail::Node> self = res.node();
  detail::track(res, {&x}, [x, self, r, c](std::span<const double> g) {
    const auto& lse = self.lock()->data;
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[i] * std::exp(x[i * c + j] - lse[i]);
  });
  return res;
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
// Rows whose target equals ignore_index contribute nothing.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                            std::int64_t ignore_index = -100) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t t = logits.rows(), v = logits.cols();
  if (targets.size() != t)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t) + " rows");
  std::size_t count = 0;
  double total = 0.0;
  std::vector<double> lse(t, 0.0);
  for (std::size_t r = 0; r < t; ++r) {
    const auto tgt = targets[r];
    if (tgt == ignore_index) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) +
                              " outside vocabulary of " + std::to_string(v));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[r * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[r * v + j] - mx);
    lse[r] = mx + std::log(z);
    total += lse[r] - logits[r * v + static_cast<std::size_t>(tgt)];
    ++count;
  }
  if (count == 0) throw std::domain_error("cross_entropy: every position is ignored; mean undefined");
  Tensor res = detail::make_output({1}, {total / static_cast<double>(count)}, "cross_entropy");
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  detail::track(res, {&logits}, [logits, tg = std::move(tg), lse = std::move(lse), count, v,
                                 ignore_index](std::span<const double> g) {
    auto* gx = detail::grad_sink(logits);
    const double w = g[0] / static_cast<double>(count);
    for (std::size_t r = 0; r < tg.size(); ++r) {
      if (tg[r] == ignore_index) continue;
      for (std::size_t j = 0; j < v; ++j) (*gx)[r * v + j] += w * std::exp(logits[r * v + j] - lse[r]);
      (*gx)[r * v + static_cast<std::size_t>(tg[r])] -= w;
    }
  });
  return res;
}

// Each last-axis slice divided by its root mean square, then scaled by weight.
inline Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = kNormEpsilon) {
  const std::size_t n = x.cols();
  if (weight.numel() != n)
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) + " vs last dim of " +
                     shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] * inv[r] * weight[j];
  }
  Tensor res = detail::make_output(x.shape(), std::move(out), "rms_norm");
  detail::track(res, {&x, &weight}, [x, weight, inv = std::move(inv), rows, n](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    auto* gw = detail::grad_sink(weight);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double xhat = x[r * n + j] * inv[r];
        if (gw) (*gw)[j] += g[r * n + j] * xhat;
        dot += g[r * n + j] * weight[j] * xhat;
      }
      if (!gx) continue;
      dot /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double xhat = x[r * n + j] * inv[r];
        (*gx)[r * n + j] += (g[r * n + j] * weight[j] - xhat * dot) * inv[r];
      }
    }
  });
  return res;
}

// Rotates each consecutive dimension pair (2i, 2i+1) of row t by
// positions[t] * base^(-2i / head_dim).
inline Tensor rope(const Tensor& x, std::span<const std::int64_t> positions, double base) {
  detail::require_2d(x, "rope");
  const std::size_t t = x.rows(), hd = x.cols();
  if (hd % 2 != 0) throw ShapeError("rope: head dimension " + std::to_string(hd) + " is odd");
  if (positions.size() != t)
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " +
                     std::to_string(t) + " rows");
  if (!(base > 0.0)) throw std::invalid_argument("rope: base must be positive");
  const std::size_t half = hd / 2;
  std::vector<double> cosv(t * half), sinv(t * half), out(x.numel());
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(positions[r]) * freq;
      const double c = std::cos(ang), s = std::sin(ang);
      cosv[r * half + i] = c;
      sinv[r * half + i] = s;
      const double x0 = x[r * hd + 2 * i], x1 = x[r * hd + 2 * i + 1];
      out[r * hd + 2 * i] = x0 * c - x1 * s;
      out[r * hd + 2 * i + 1] = x0 * s + x1 * c;
    }
  Tensor res = detail::make_output(x.shape(), std::move(out), "rope");
  detail::track(res, {&x}, [x, cosv = std::move(cosv), sinv = std::move(sinv), t, hd,
                            half](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cosv[r * half + i], s = sinv[r * half + i];
        const double g0 = g[r * hd + 2 * i], g1 = g[r * hd + 2 * i + 1];
        (*gx)[r * hd + 2 * i] += g0 * c + g1 * s;
        (*gx)[r * hd + 2 * i + 1] += -g0 * s + g1 * c;
      }
  });
  return res;
}

// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > c)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  Tensor res = detail::make_output({r, w}, std::move(out), "slice_cols");
  detail::track(res, {&x}, [x, r, c, w, begin](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*gx)[i * c + begin + j] += g[i * w + j];
  });
  return res;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != r) throw ShapeError("concat_cols: row count mismatch " + shape_str(p.shape()));
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * total + off + j] = p[i * p.cols() + j];
    off += p.cols();
  }
  Tensor res = detail::make_output({r, total}, std::move(out), "concat_cols");
  auto* tape = GradTape::current();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    res.set_requires_grad(true);
    tape->record(res, [parts, r, total](std::span<const double> g) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (auto* gp = detail::grad_sink(p))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) (*gp)[i * p.cols() + j] += g[i * total + off + j];
        off += p.cols();
      }
    });
  }
  return res;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column count mismatch " + shape_str(p.shape()));
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor res = detail::make_output({total, c}, std::move(out), "concat_rows");
  auto* tape = GradTape::current();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    res.set_requires_grad(true);
    tape->record(res, [parts](std::span<const double> g) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (auto* gp = detail::grad_sink(p))
          for (std::size_t i = 0; i < p.numel(); ++i) (*gp)[i] += g[off + i];
        off += p.numel();
      }
    });
  }
  return res;
}

// out[i] = x[index[i]] (rows of a 2-D tensor).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_2d(x, "gather_rows");
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const std::size_t c = x.cols();
  std::vector<double> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows())
      throw std::out_of_range("gather_rows: row " + std::to_string(index[i]) + " of " +
                              std::to_string(x.rows()));
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(index[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  Tensor res = detail::make_output({index.size(), c}, std::move(out), "gather_rows");
  std::vector<std::size_t> idx(index.begin(), index.end());
  detail::track(res, {&x}, [x, idx = std::move(idx), c](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*gx)[idx[i] * c + j] += g[i * c + j];
  });
  return res;
}

// base with src[i] added into row index[i]; rows accumulate in index order.
inline Tensor index_add_rows(const Tensor& base, std::span<const std::size_t> index,
                             const Tensor& src) {
  detail::require_2d(base, "index_add_rows");
  detail::require_2d(src, "index_add_rows");
  const std::size_t c = base.cols();
  if (src.cols() != c || src.rows() != index.size())
    throw ShapeError("index_add_rows: source " + shape_str(src.shape()) + " incompatible with " +
                     std::to_string(index.size()) + " rows of width " + std::to_string(c));
  std::vector<double> out(base.data().begin(), base.data().end());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= base.rows())
      throw std::out_of_range("index_add_rows: row " + std::to_string(index[i]));
    for (std::size_t j = 0; j < c; ++j) out[index[i] * c + j] += src[i * c + j];
  }
  Tensor res = detail::make_output(base.shape(), std::move(out), "index_add_rows");
  std::vector<std::size_t> idx(index.begin(), index.end());
  detail::track(res, {&base, &src}, [base, src, idx = std::move(idx), c](std::span<const double> g) {
    if (auto* gb = detail::grad_sink(base))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    if (auto* gs = detail::grad_sink(src))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*gs)[i * c + j] += g[idx[i] * c + j];
  });
  return res;
}

// 1-D tensor of x's elements at the given flat offsets.
inline Tensor take(const Tensor& x, std::span<const std::size_t> flat) {
  if (flat.empty()) throw ShapeError("take: empty index");
  std::vector<double> out(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= x.numel()) throw std::out_of_range("take: offset " + std::to_string(flat[i]));
    out[i] = x[flat[i]];
  }
  Tensor res = detail::make_output({flat.size()}, std::move(out), "take");
  std::vector<std::size_t> idx(flat.begin(), flat.end());
  detail::track(res, {&x}, [x, idx = std::move(idx)](std::span<const double> g) {
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += g[i];
  });
  return res;
}

// Each row divided by its sum. Rows must have a positive sum.
inline Tensor normalize_rows(const Tensor& x) {
  detail::require_2d(x, "normalize_rows");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> sums(r, 0.0), out(x.numel());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += x[i * c + j];
    if (!(sums[i] > 0.0)) throw NumericError("normalize_rows: non-positive row sum");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / sums[i];
  }
  Tensor res = detail::make_output(x.shape(), std::move(out), "normalize_rows");
  std::weak_ptr<detail::Node> self = res.node();
  detail::track(res, {&x}, [x, self, sums = std::move(sums), r, c](std::span<const double> g) {
    const auto& y = self.lock()->data;
    auto* gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += (g[i * c + j] - dot) / sums[i];
    }
  });
  return res;
}

}  // namespace mmoe
