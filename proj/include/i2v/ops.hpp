#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "i2v/graph.hpp"
#include "i2v/tensor.hpp"

// Differentiable operations on rank-2 tensors. Every op computes its forward
// value eagerly and, when the graph records, registers a closure that
// accumulates parent gradients.
namespace i2v::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

inline MapC emap(const Tensor& t) {
  return MapC(t.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}
inline MapM emap(Tensor& t) {
  return MapM(t.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " +
                     shape_string(t.shape()));
  }
}

inline void require_same_graph(Var a, Var b, const char* op) {
  if (a.graph() != b.graph()) {
    throw InputError(std::string(op) + ": operands belong to different graphs");
  }
}

inline void require_row_vector(const Tensor& t, std::size_t n, const char* op) {
  if (t.rows() != 1 || t.cols() != n) {
    throw ShapeError(std::string(op) + ": expected 1x" + std::to_string(n) +
                     " row, got " + shape_string(t.shape()));
  }
}

inline void require_offsets(const std::vector<std::size_t>& offsets, std::size_t n,
                            const char* op) {
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != n) {
    throw ShapeError(std::string(op) + ": segment offsets must span [0, rows]");
  }
  for (std::size_t s = 1; s < offsets.size(); ++s) {
    if (offsets[s] <= offsets[s - 1]) {
      throw ShapeError(std::string(op) + ": empty or decreasing segment");
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) +
                     " x " + shape_string(bv.shape()));
  }
  Tensor out = Tensor::zeros(av.rows(), bv.cols());
  detail::emap(out).noalias() = detail::emap(av) * detail::emap(bv);
  Graph& g = *a.graph();
  return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (g.requires_grad(a)) {
      detail::emap(g.grad(a)).noalias() += detail::emap(dy) * detail::emap(b.value()).transpose();
    }
    if (g.requires_grad(b)) {
      detail::emap(g.grad(b)).noalias() += detail::emap(a.value()).transpose() * detail::emap(dy);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "transpose");
  Tensor out = Tensor::zeros(av.cols(), av.rows());
  detail::emap(out) = detail::emap(av).transpose();
  return a.graph()->push(std::move(out), {a}, [a](Graph& g, const Tensor& dy) {
    detail::emap(g.grad(a)) += detail::emap(dy).transpose();
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b, "add");
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.graph()->push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (g.requires_grad(a)) g.grad(a) += dy;
    if (g.requires_grad(b)) g.grad(b) += dy;
  });
}

// x (m x n) + bias (1 x n), broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_graph(x, bias, "add_bias");
  const Tensor& xv = x.value();
  detail::require_row_vector(bias.value(), xv.cols(), "add_bias");
  Tensor out = xv;
  detail::emap(out).rowwise() += detail::emap(bias.value()).row(0);
  return x.graph()->push(std::move(out), {x, bias}, [x, bias](Graph& g, const Tensor& dy) {
    if (g.requires_grad(x)) g.grad(x) += dy;
    if (g.requires_grad(bias)) {
      detail::emap(g.grad(bias)).row(0) += detail::emap(dy).colwise().sum();
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.graph()->push(std::move(out), {a}, [a, s](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += s * dy[i];
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b, "mul");
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph()->push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad(a);
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad(b);
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i] * av[i];
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.graph()->push(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    const double d = dy[0];
    for (auto& v : ga.values()) v += d;
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = detail::sigmoid(v);
  auto saved = std::make_shared<Tensor>(out);
  return a.graph()->push(std::move(out), {a}, [a, saved](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    const Tensor& y = *saved;
    for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  auto saved = std::make_shared<Tensor>(out);
  return a.graph()->push(std::move(out), {a}, [a, saved](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    const Tensor& y = *saved;
    for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * (1.0 - y[i] * y[i]);
  });
}

// Exact GELU: x * Phi(x).
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return a.graph()->push(std::move(out), {a}, [a](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    const Tensor& x = a.value();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += dy[i] * (cdf + x[i] * pdf);
    }
  });
}

namespace detail {

inline void softmax_inplace(std::span<double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : row) v /= s;
}

// dx = y * (dy - <dy, y>) for one softmax row, accumulated into dx.
inline void softmax_backward_row(std::span<const double> y, std::span<const double> dy,
                                 std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < y.size(); ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace detail

// Row-wise softmax stabilized by subtracting each row's maximum.
inline Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "softmax_rows");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) detail::softmax_inplace(out.row_span(r));
  auto saved = std::make_shared<Tensor>(out);
  return a.graph()->push(std::move(out), {a}, [a, saved](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      detail::softmax_backward_row(saved->row_span(r), dy.row_span(r), ga.row_span(r));
    }
  });
}

// Per-row normalization to zero mean and unit variance, then gain * x + bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  detail::require_same_graph(x, gain, "layer_norm");
  detail::require_same_graph(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "layer_norm");
  const std::size_t m = xv.rows();
  const std::size_t n = xv.cols();
  detail::require_row_vector(gain.value(), n, "layer_norm gain");
  detail::require_row_vector(bias.value(), n, "layer_norm bias");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();

  auto xhat = std::make_shared<Tensor>(Tensor::zeros(m, n));
  auto inv_sigma = std::make_shared<std::vector<double>>(m);
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = xv.row_span(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * is;
      (*xhat)(r, c) = h;
      out(r, c) = gv[c] * h + bv[c];
    }
  }
  return x.graph()->push(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_sigma, m, n](Graph& g, const Tensor& dy) {
        if (g.requires_grad(gain)) {
          Tensor& gg = g.grad(gain);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += dy(r, c) * (*xhat)(r, c);
        }
        if (g.requires_grad(bias)) {
          Tensor& gb = g.grad(bias);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += dy(r, c);
        }
        if (g.requires_grad(x)) {
          Tensor& gx = g.grad(x);
          const Tensor& gv = gain.value();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = dy(r, c) * gv[c];
              mean_d += d;
              mean_dx += d * (*xhat)(r, c);
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            const double is = (*inv_sigma)[r];
            for (std::size_t c = 0; c < n; ++c) {
              const double d = dy(r, c) * gv[c];
              gx(r, c) += is * (d - mean_d - (*xhat)(r, c) * mean_dx);
            }
          }
        }
      });
}

// Rows of `table` selected by index (embedding lookup); backward scatter-adds.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
  const Tensor& tv = table.value();
  detail::require_rank2(tv, "gather_rows");
  const std::size_t n = tv.cols();
  Tensor out = Tensor::zeros(index.size(), n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[r]) +
                       " out of range for " + shape_string(tv.shape()));
    }
    std::copy_n(tv.data() + index[r] * n, n, out.data() + r * n);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return table.graph()->push(std::move(out), {table}, [table, idx, n](Graph& g, const Tensor& dy) {
    Tensor& gt = g.grad(table);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = gt.data() + (*idx)[r] * n;
      const double* src = dy.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
    }
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.rows()) throw ShapeError("slice_rows: bad range");
  const std::size_t n = av.cols();
  if (begin == 0 && end == av.rows()) return a;
  Tensor out({end - begin, n},
             std::vector<double>(av.data() + begin * n, av.data() + end * n));
  return a.graph()->push(std::move(out), {a}, [a, begin, n](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    double* dst = ga.data() + begin * n;
    for (std::size_t i = 0; i < dy.size(); ++i) dst[i] += dy[i];
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.cols()) throw ShapeError("slice_cols: bad range");
  const std::size_t m = av.rows();
  const std::size_t w = end - begin;
  Tensor out = Tensor::zeros(m, w);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data() + r * av.cols() + begin, w, out.data() + r * w);
  }
  return a.graph()->push(std::move(out), {a}, [a, begin, w](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(a);
    const std::size_t n = ga.cols();
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += dy(r, c);
    }
    (void)n;
  });
}

inline Var concat_cols(Var a, Var b) {
  detail::require_same_graph(a, b, "concat_cols");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row counts differ");
  const std::size_t m = av.rows(), na = av.cols(), nb = bv.cols();
  Tensor out = Tensor::zeros(m, na + nb);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data() + r * na, na, out.data() + r * (na + nb));
    std::copy_n(bv.data() + r * nb, nb, out.data() + r * (na + nb) + na);
  }
  return a.graph()->push(std::move(out), {a, b}, [a, b, m, na, nb](Graph& g, const Tensor& dy) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad(a);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < na; ++c) ga(r, c) += dy(r, c);
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad(b);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < nb; ++c) gb(r, c) += dy(r, na + c);
    }
  });
}

// Vertical stack of same-width blocks.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  if (parts.size() == 1) return parts.front();
  Graph& graph = *parts.front().graph();
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.graph() != &graph) throw InputError("concat_rows: mixed graphs");
    if (p.cols() != n) throw ShapeError("concat_rows: widths differ");
    m += p.rows();
  }
  Tensor out = Tensor::zeros(m, n);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.values().begin(), pv.values().end(), out.data() + offset * n);
    offset += pv.rows();
  }
  auto list = std::make_shared<std::vector<Var>>(parts);
  return graph.push(std::move(out), std::span<const Var>(parts), [list, n](Graph& g, const Tensor& dy) {
    std::size_t offset = 0;
    for (const Var& p : *list) {
      const std::size_t rows = p.rows();
      if (g.requires_grad(p)) {
        Tensor& gp = g.grad(p);
        const double* src = dy.data() + offset * n;
        for (std::size_t i = 0; i < rows * n; ++i) gp[i] += src[i];
      }
      offset += rows;
    }
  });
}

// Softmax(q k^T / sqrt(d_k)) v for a single sequence.
inline Var scaled_dot_attention(Var q, Var k, Var v) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.cols() != kv.cols()) throw ShapeError("attention: q and k widths differ");
  if (kv.rows() != vv.rows()) throw ShapeError("attention: k and v lengths differ");
  const double s = 1.0 / std::sqrt(static_cast<double>(qv.cols()));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), s)), v);
}

// Multi-head self-attention applied independently within each row segment
// [offsets[s], offsets[s+1]). Rows of different segments never attend to
// each other; this is the batched form of padding-masked attention.
// q, k, v: N x d with d divisible by n_heads. Returns N x d (heads concatenated).
inline Var segment_attention(Var q, Var k, Var v, std::vector<std::size_t> offsets,
                             std::size_t n_heads) {
  detail::require_same_graph(q, k, "segment_attention");
  detail::require_same_graph(q, v, "segment_attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  qv.require_same_shape(kv, "segment_attention q/k");
  qv.require_same_shape(vv, "segment_attention q/v");
  const std::size_t rows = qv.rows();
  const std::size_t d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("segment_attention: width not divisible by head count");
  }
  detail::require_offsets(offsets, rows, "segment_attention");
  const std::size_t dh = d / n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs stores, per segment and head, the L x L attention matrix.
  auto probs = std::make_shared<std::vector<double>>();
  std::size_t total = 0;
  for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
    const std::size_t len = offsets[seg + 1] - offsets[seg];
    total += len * len * n_heads;
  }
  probs->resize(total);

  Tensor out = Tensor::zeros(rows, d);
  std::size_t pos = 0;
  for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
    const std::size_t b = offsets[seg];
    const std::size_t len = offsets[seg + 1] - b;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      double* p = probs->data() + pos;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = qv.data() + (b + i) * d + c0;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kv.data() + (b + j) * d + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          p[i * len + j] = dot * s;
        }
        detail::softmax_inplace({p + i * len, len});
        double* oi = out.data() + (b + i) * d + c0;
        for (std::size_t j = 0; j < len; ++j) {
          const double w = p[i * len + j];
          const double* vj = vv.data() + (b + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
      pos += len * len;
    }
  }

  auto offs = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return q.graph()->push(
      std::move(out), {q, k, v},
      [q, k, v, probs, offs, n_heads, dh, d, s](Graph& g, const Tensor& dy) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        Tensor* gq = g.requires_grad(q) ? &g.grad(q) : nullptr;
        Tensor* gk = g.requires_grad(k) ? &g.grad(k) : nullptr;
        Tensor* gv = g.requires_grad(v) ? &g.grad(v) : nullptr;
        std::vector<double> dp;
        std::size_t pos = 0;
        for (std::size_t seg = 0; seg + 1 < offs->size(); ++seg) {
          const std::size_t b = (*offs)[seg];
          const std::size_t len = (*offs)[seg + 1] - b;
          dp.assign(len * len, 0.0);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            const double* p = probs->data() + pos;
            // dP = dO V^T ; dV = P^T dO
            for (std::size_t i = 0; i < len; ++i) {
              const double* doi = dy.data() + (b + i) * d + c0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = vv.data() + (b + j) * d + c0;
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += doi[c] * vj[c];
                dp[i * len + j] = dot;
                if (gv) {
                  double* gvj = gv->data() + (b + j) * d + c0;
                  const double w = p[i * len + j];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * doi[c];
                }
              }
            }
            // dS = softmax backward, then scaled into dQ and dK.
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = p[i * len + j] * (dp[i * len + j] - dot) * s;
                if (ds == 0.0) continue;
                if (gq) {
                  double* gqi = gq->data() + (b + i) * d + c0;
                  const double* kj = kv.data() + (b + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk->data() + (b + j) * d + c0;
                  const double* qi = qv.data() + (b + i) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
            pos += len * len;
          }
        }
      });
}

// Softmax of one score per row within each segment, then the weighted sum of
// that segment's value rows. scores: N x 1, values: N x d. Returns S x d.
inline Var segment_attention_pool(Var scores, Var values, std::vector<std::size_t> offsets) {
  detail::require_same_graph(scores, values, "segment_attention_pool");
  const Tensor& sv = scores.value();
  const Tensor& vv = values.value();
  if (sv.cols() != 1 || sv.rows() != vv.rows()) {
    throw ShapeError("segment_attention_pool: scores must be N x 1 matching values");
  }
  detail::require_offsets(offsets, vv.rows(), "segment_attention_pool");
  const std::size_t d = vv.cols();
  const std::size_t nseg = offsets.size() - 1;
  auto weights = std::make_shared<std::vector<double>>(sv.values());
  Tensor out = Tensor::zeros(nseg, d);
  for (std::size_t s = 0; s < nseg; ++s) {
    const std::size_t b = offsets[s], len = offsets[s + 1] - b;
    detail::softmax_inplace({weights->data() + b, len});
    for (std::size_t i = 0; i < len; ++i) {
      const double w = (*weights)[b + i];
      for (std::size_t c = 0; c < d; ++c) out(s, c) += w * vv(b + i, c);
    }
  }
  auto offs = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return scores.graph()->push(
      std::move(out), {scores, values},
      [scores, values, weights, offs, d, nseg](Graph& g, const Tensor& dy) {
        const Tensor& vv = values.value();
        Tensor* gs = g.requires_grad(scores) ? &g.grad(scores) : nullptr;
        Tensor* gv = g.requires_grad(values) ? &g.grad(values) : nullptr;
        for (std::size_t s = 0; s < nseg; ++s) {
          const std::size_t b = (*offs)[s], len = (*offs)[s + 1] - b;
          // dw_i = <dy_s, v_i>; softmax backward gives d score.
          double dot = 0.0;
          std::vector<double> dw(len);
          for (std::size_t i = 0; i < len; ++i) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += dy(s, c) * vv(b + i, c);
            dw[i] = acc;
            dot += acc * (*weights)[b + i];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const double w = (*weights)[b + i];
            if (gs) (*gs)[b + i] += w * (dw[i] - dot);
            if (gv) {
              for (std::size_t c = 0; c < d; ++c) (*gv)(b + i, c) += w * dy(s, c);
            }
          }
        }
      });
}

inline void validate_distribution_rows(const Tensor& target, double tol = 1e-9) {
  for (std::size_t r = 0; r < target.rows(); ++r) {
    double s = 0.0;
    for (double v : target.row_span(r)) {
      if (!(v >= 0.0)) throw InputError("cross_entropy: negative target entry");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw InputError("cross_entropy: target row " + std::to_string(r) +
                       " sums to " + std::to_string(s));
    }
  }
}

// Mean over rows of -sum_j target_j * log softmax(logits)_j. Log-softmax is
// fused so that saturated logits never take log(0).
inline Var cross_entropy(Var logits, const Tensor& target) {
  const Tensor& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy");
  lv.require_same_shape(target, "cross_entropy");
  validate_distribution_rows(target);
  const std::size_t m = lv.rows(), n = lv.cols();
  auto probs = std::make_shared<Tensor>(lv);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = lv.row_span(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    const double lse = mx + std::log(se);
    double loss = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double t = target(r, c);
      if (t != 0.0) loss -= t * (row[c] - lse);
      (*probs)(r, c) = std::exp(row[c] - lse);
    }
    total += loss;
  }
  auto tgt = std::make_shared<Tensor>(target);
  const double inv_m = 1.0 / static_cast<double>(m);
  return logits.graph()->push(
      Tensor::scalar(total * inv_m), {logits}, [logits, probs, tgt, inv_m](Graph& g, const Tensor& dy) {
        Tensor& gl = g.grad(logits);
        const double d = dy[0] * inv_m;
        for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += d * ((*probs)[i] - (*tgt)[i]);
      });
}

// Mean over rows of the summed binary cross-entropy with logits.
inline Var bce_with_logits(Var logits, const Tensor& target) {
  const Tensor& lv = logits.value();
  lv.require_same_shape(target, "bce_with_logits");
  const std::size_t m = lv.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double x = lv[i], t = target[i];
    if (t < 0.0 || t > 1.0) throw InputError("bce_with_logits: target outside [0,1]");
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  auto tgt = std::make_shared<Tensor>(target);
  const double inv_m = 1.0 / static_cast<double>(m);
  return logits.graph()->push(
      Tensor::scalar(total * inv_m), {logits}, [logits, tgt, inv_m](Graph& g, const Tensor& dy) {
        Tensor& gl = g.grad(logits);
        const Tensor& lv = logits.value();
        const double d = dy[0] * inv_m;
        for (std::size_t i = 0; i < gl.size(); ++i) {
          gl[i] += d * (detail::sigmoid(lv[i]) - (*tgt)[i]);
        }
      });
}

// Mean squared error over all elements.
inline Var mse(Var pred, const Tensor& target) {
  const Tensor& pv = pred.value();
  pv.require_same_shape(target, "mse");
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double e = pv[i] - target[i];
    total += e * e;
  }
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  auto tgt = std::make_shared<Tensor>(target);
  return pred.graph()->push(
      Tensor::scalar(total * inv_n), {pred}, [pred, tgt, inv_n](Graph& g, const Tensor& dy) {
        Tensor& gp = g.grad(pred);
        const Tensor& pv = pred.value();
        for (std::size_t i = 0; i < gp.size(); ++i) {
          gp[i] += dy[0] * 2.0 * inv_n * (pv[i] - (*tgt)[i]);
        }
      });
}

// Value-level helpers for code that does not need gradients.
inline Tensor softmax_rows(const Tensor& t) {
  Tensor out = t;
  for (std::size_t r = 0; r < out.rows(); ++r) detail::softmax_inplace(out.row_span(r));
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  detail::emap(out).noalias() = detail::emap(a) * detail::emap(b);
  return out;
}

}  // namespace i2v::ops
