#pragma once

// Differentiable dense ops. Every op validates shapes, computes the forward
// value, and — when a tape is supplied and any input requires a gradient —
// records a closure that accumulates input gradients from the output grad.
// An output whose grad buffer was never touched contributes nothing, so the
// closures bail out early in that case.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rulemem/tape.hpp"
#include "rulemem/tensor.hpp"

namespace rulemem::diff::ops {

namespace detail {

// C(m,n) += A(m,k) * B(k,n)
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split(const char* op, const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) + " out of range for " +
                                shape_str(t.shape()));
  }
  AxisSplit s{1, t.shape()[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= t.shape()[i];
  for (std::size_t i = axis + 1; i < t.rank(); ++i) s.inner *= t.shape()[i];
  return s;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline bool record_wanted(Tape* tape, bool any_rg) {
  return tape != nullptr && any_rg;
}

}  // namespace detail

inline constexpr double kLogClampLo = 1e-12;
inline constexpr double kLogClampHi = 1.0;

inline Tensor matmul(Tape* tape, Tensor a, Tensor b) {
  detail::require(a.rank() == 2 && b.rank() == 2 &&
                      a.shape()[1] == b.shape()[0],
                  "matmul: incompatible shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n}, a.requires_grad() || b.requires_grad());
  detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(),
                  m, k, n);
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad())
        detail::gemm_nt(g, b.values().data(), a.grad().data(), m, n, k);
      if (b.requires_grad())
        detail::gemm_tn(a.values().data(), g, b.grad().data(), k, m, n);
    });
  }
  return out;
}

// Elementwise add; b may also broadcast across a's leading dimension
// (a: (B, rest...), b: (rest...)).
inline Tensor add(Tape* tape, Tensor a, Tensor b) {
  const bool same = a.shape() == b.shape();
  bool bcast = false;
  if (!same) {
    bcast = a.rank() == b.rank() + 1 &&
            std::equal(a.shape().begin() + 1, a.shape().end(),
                       b.shape().begin());
    detail::require(bcast, "add: incompatible shapes " + shape_str(a.shape()) +
                               " and " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.size(), bn = b.size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] + b.values()[i % bn];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, b, out, n, bn]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        for (std::size_t i = 0; i < n; ++i) gb[i % bn] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape* tape, Tensor a, Tensor b) {
  detail::require(a.shape() == b.shape(),
                  "mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, b, out, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.values()[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a.values()[i];
      }
    });
  }
  return out;
}

inline Tensor scalar_mul(Tape* tape, Tensor a, double k) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = k * a.values()[i];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += k * g[i];
    });
  }
  return out;
}

inline Tensor relu(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i)
        if (a.values()[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

inline Tensor sigmoid(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.values()[i];
    out.values()[i] =
        x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                 : std::exp(x) / (1.0 + std::exp(x));
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double s = out.values()[i];
        ga[i] += g[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

inline Tensor softmax(Tape* tape, Tensor a, std::size_t axis) {
  auto sp = detail::split("softmax", a, axis);
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < sp.n; ++i)
        m = std::max(m, a.values()[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) {
        const double e = std::exp(a.values()[base + i * sp.inner] - m);
        out.values()[base + i * sp.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i)
        out.values()[base + i * sp.inner] /= z;
    }
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, sp]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            dot += g[k] * out.values()[k];
          }
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            ga[k] += (g[k] - dot) * out.values()[k];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor log_softmax(Tape* tape, Tensor a, std::size_t axis) {
  auto sp = detail::split("log_softmax", a, axis);
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < sp.n; ++i)
        m = std::max(m, a.values()[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i)
        z += std::exp(a.values()[base + i * sp.inner] - m);
      const double lse = m + std::log(z);
      for (std::size_t i = 0; i < sp.n; ++i) {
        const std::size_t k = base + i * sp.inner;
        out.values()[k] = a.values()[k] - lse;
      }
    }
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, sp]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          double gsum = 0.0;
          for (std::size_t i = 0; i < sp.n; ++i)
            gsum += g[base + i * sp.inner];
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            ga[k] += g[k] - std::exp(out.values()[k]) * gsum;
          }
        }
      }
    });
  }
  return out;
}

// Natural log of a probability. Inputs are clamped to [1e-12, 1] so that a
// rule that assigns zero likelihood to an observation yields a large finite
// penalty instead of -inf; clamped entries carry zero gradient.
inline Tensor log(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x =
        std::min(kLogClampHi, std::max(kLogClampLo, a.values()[i]));
    out.values()[i] = std::log(x);
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = a.values()[i];
        if (x >= kLogClampLo && x <= kLogClampHi) ga[i] += g[i] / x;
      }
    });
  }
  return out;
}

inline Tensor exp(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::exp(a.values()[i]);
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * out.values()[i];
    });
  }
  return out;
}

inline Tensor sum(Tape* tape, Tensor a, std::size_t axis) {
  auto sp = detail::split("sum", a, axis);
  std::vector<std::size_t> shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) shape.push_back(a.shape()[i]);
  Tensor out = Tensor::zeros(shape, a.requires_grad());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.n; ++i)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out.values()[o * sp.inner + in] +=
            a.values()[(o * sp.n + i) * sp.inner + in];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, sp]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.n; ++i)
          for (std::size_t in = 0; in < sp.inner; ++in)
            ga[(o * sp.n + i) * sp.inner + in] += g[o * sp.inner + in];
    });
  }
  return out;
}

inline Tensor sum_all(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros({}, a.requires_grad());
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  out.values()[0] = acc;
  if (detail::record_wanted(tape, out.requires_grad())) {
    const std::size_t n = a.size();
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

inline Tensor logsumexp(Tape* tape, Tensor a, std::size_t axis) {
  auto sp = detail::split("logsumexp", a, axis);
  std::vector<std::size_t> shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) shape.push_back(a.shape()[i]);
  Tensor out = Tensor::zeros(shape, a.requires_grad());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < sp.n; ++i)
        m = std::max(m, a.values()[(o * sp.n + i) * sp.inner + in]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i)
        z += std::exp(a.values()[(o * sp.n + i) * sp.inner + in] - m);
      out.values()[o * sp.inner + in] = m + std::log(z);
    }
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, sp]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const double lse = out.values()[o * sp.inner + in];
          const double go = g[o * sp.inner + in];
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = (o * sp.n + i) * sp.inner + in;
            ga[k] += go * std::exp(a.values()[k] - lse);
          }
        }
      }
    });
  }
  return out;
}

// Gathers slices along axis 0.
inline Tensor gather_rows(Tape* tape, Tensor a,
                          std::vector<std::size_t> idx) {
  detail::require(a.rank() >= 1, "gather_rows: rank-0 input");
  std::size_t inner = 1;
  for (std::size_t i = 1; i < a.rank(); ++i) inner *= a.shape()[i];
  for (std::size_t r : idx)
    detail::require(r < a.shape()[0],
                    "gather_rows: index " + std::to_string(r) +
                        " out of range for " + shape_str(a.shape()));
  std::vector<std::size_t> shape = a.shape();
  shape[0] = idx.size();
  Tensor out = Tensor::zeros(shape, a.requires_grad());
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.values().data() + idx[r] * inner, inner,
                out.values().data() + r * inner);
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, idx, inner]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t i = 0; i < inner; ++i)
          ga[idx[r] * inner + i] += g[r * inner + i];
    });
  }
  return out;
}

// Gathers columns of a 2-d tensor (also usable as a column permutation).
inline Tensor gather_cols(Tape* tape, Tensor a,
                          std::vector<std::size_t> idx) {
  detail::require(a.rank() == 2, "gather_cols: input " + shape_str(a.shape()) +
                                     " is not 2-d");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  for (std::size_t c : idx)
    detail::require(c < cols, "gather_cols: index " + std::to_string(c) +
                                  " out of range for " + shape_str(a.shape()));
  Tensor out = Tensor::zeros({rows, idx.size()}, a.requires_grad());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < idx.size(); ++c)
      out.values()[r * idx.size() + c] = a.values()[r * cols + idx[c]];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, idx, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < idx.size(); ++c)
          ga[r * cols + idx[c]] += g[r * idx.size() + c];
    });
  }
  return out;
}

inline Tensor concat(Tape* tape, std::vector<Tensor> parts,
                     std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const std::size_t rank = parts[0].rank();
  detail::require(axis < rank, "concat: axis out of range");
  std::size_t total = 0;
  bool any_rg = false;
  for (const Tensor& p : parts) {
    detail::require(p.rank() == rank, "concat: rank mismatch");
    for (std::size_t i = 0; i < rank; ++i)
      detail::require(i == axis || p.shape()[i] == parts[0].shape()[i],
                      "concat: incompatible shapes " +
                          shape_str(parts[0].shape()) + " and " +
                          shape_str(p.shape()));
    total += p.shape()[axis];
    any_rg = any_rg || p.requires_grad();
  }
  std::vector<std::size_t> shape = parts[0].shape();
  shape[axis] = total;
  Tensor out = Tensor::zeros(shape, any_rg);
  auto sp = detail::split("concat", out, axis);
  std::size_t pos = 0;
  for (const Tensor& p : parts) {
    const std::size_t pn = p.shape()[axis];
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.values().data() + o * pn * sp.inner, pn * sp.inner,
                  out.values().data() + (o * sp.n + pos) * sp.inner);
    pos += pn;
  }
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [parts, out, sp, axis]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      std::size_t pos = 0;
      for (Tensor& p : parts) {
        const std::size_t pn = p.shape()[axis];
        if (p.requires_grad()) {
          double* gp = p.grad().data();
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < pn * sp.inner; ++i)
              gp[o * pn * sp.inner + i] +=
                  g[(o * sp.n + pos) * sp.inner + i];
        }
        pos += pn;
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape* tape, Tensor a) {
  detail::require(a.rank() == 2, "transpose: input " + shape_str(a.shape()) +
                                     " is not 2-d");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out = Tensor::zeros({cols, rows}, a.requires_grad());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.values()[c * rows + r] = a.values()[r * cols + c];
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] += g[c * rows + r];
    });
  }
  return out;
}

inline Tensor reshape(Tape* tape, Tensor a,
                      std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  detail::require(n == a.size(), "reshape: cannot view " +
                                     shape_str(a.shape()) + " as " +
                                     shape_str(shape));
  Tensor out = Tensor::from_values(shape, a.values(), a.requires_grad());
  if (detail::record_wanted(tape, out.requires_grad())) {
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

}  // namespace rulemem::diff::ops
