#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "ttpk/common.hpp"

namespace ttpk {

// Dense row-major f64 tensor. `node` is the handle into the Tape that
// recorded the op producing it; -1 means detached (constant).
class Tensor {
 public:
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  int node = -1;

  Tensor() : data(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(std::vector<int> shp, double fill = 0.0)
      : shape(std::move(shp)),
        data(std::make_shared<std::vector<double>>(numel_of(shape), fill)) {}

  static Tensor from(std::vector<int> shp, std::vector<double> values) {
    if (numel_of(shp) != static_cast<std::int64_t>(values.size()))
      throw DimensionError("from(): got " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shp));
    Tensor t;
    t.shape = std::move(shp);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor randn(std::vector<int> shp, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shp));
    for (double& v : *t.data) v = rng.normal(0.0, stddev);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data->size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }

  double& operator[](std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

  double& at2(int i, int j) { return (*data)[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at2(int i, int j) const { return (*data)[static_cast<std::size_t>(i) * shape[1] + j]; }
  double& at3(int c, int y, int x) {
    return (*data)[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at3(int c, int y, int x) const {
    return (*data)[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  double item() const {
    if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape));
    return (*data)[0];
  }

  // Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
  }

  Tensor detached() const {
    Tensor t = *this;
    t.node = -1;
    return t;
  }

  bool all_finite() const {
    for (double v : *data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Records forward ops so gradients can be replayed in reverse. Creation
// order is topological by construction: an op's inputs always exist
// before its output node is pushed.
class Tape {
 public:
  bool recording = true;
  bool finite_checks = true;

  void reset() {
    backs_.clear();
    shapes_.clear();
    grads_.clear();
  }

  std::size_t size() const { return backs_.size(); }

  // Registers a tensor as a gradient leaf (e.g. a trainable parameter).
  int leaf(Tensor& t) {
    t.node = push_node(nullptr, t.shape);
    return t.node;
  }

  int push_node(std::function<void(Tape&, const std::vector<double>&)> back,
                const std::vector<int>& shape) {
    backs_.push_back(std::move(back));
    shapes_.push_back(shape);
    return static_cast<int>(backs_.size()) - 1;
  }

  void accum(int node, const double* g, std::int64_t n) {
    if (node < 0) return;
    auto& slot = grads_at(node);
    if (!slot) {
      slot = std::make_unique<std::vector<double>>(g, g + n);
    } else {
      double* dst = slot->data();
      for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }
  }

  bool has_grad(const Tensor& t) const {
    return t.node >= 0 && t.node < static_cast<int>(grads_.size()) && grads_[t.node] != nullptr;
  }

  Tensor grad(const Tensor& t) const {
    if (!has_grad(t)) throw StateError("no gradient recorded for this tensor");
    Tensor g;
    g.shape = shapes_[t.node];
    g.data = std::make_shared<std::vector<double>>(*grads_[t.node]);
    return g;
  }

  // Reverse-topological accumulation from a scalar loss. Nodes the loss
  // does not reach never receive a gradient entry.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ArgumentError("backward() needs a scalar loss");
    if (loss.node < 0) throw StateError("backward() on a detached loss");
    grads_.clear();
    grads_.resize(backs_.size());
    grads_[loss.node] = std::make_unique<std::vector<double>>(1, 1.0);
    for (int id = loss.node; id >= 0; --id) {
      if (!grads_[id] || !backs_[id]) continue;
      backs_[id](*this, *grads_[id]);
    }
  }

 private:
  std::unique_ptr<std::vector<double>>& grads_at(int node) {
    if (grads_.size() < backs_.size()) grads_.resize(backs_.size());
    return grads_[static_cast<std::size_t>(node)];
  }

  std::vector<std::function<void(Tape&, const std::vector<double>&)>> backs_;
  std::vector<std::vector<int>> shapes_;
  std::vector<std::unique_ptr<std::vector<double>>> grads_;
};

namespace detail {

inline void check_finite(const Tape& tp, const Tensor& t, const char* op) {
  if (!tp.finite_checks) return;
  if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline bool any_tracked(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->node >= 0) return true;
  return false;
}

// C[m,n] += A[m,k] * B[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double ap = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += ap * bp[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void mm_acc_nt(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * n;
    double* ci = c + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * n;
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_acc_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double ap = ai[p];
      if (ap == 0.0) continue;
      double* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += ap * bi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw DimensionError("add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  detail::check_finite(tp, out, "add");
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    out.node = tp.push_node([an, bn, n](Tape& t, const std::vector<double>& g) {
      t.accum(an, g.data(), n);
      t.accum(bn, g.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor sub(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw DimensionError("sub: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  detail::check_finite(tp, out, "sub");
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    out.node = tp.push_node([an, bn, n](Tape& t, const std::vector<double>& g) {
      t.accum(an, g.data(), n);
      if (bn >= 0) {
        std::vector<double> ng(g.size());
        for (std::int64_t i = 0; i < n; ++i) ng[i] = -g[i];
        t.accum(bn, ng.data(), n);
      }
    }, out.shape);
  }
  return out;
}

inline Tensor mul(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw DimensionError("mul: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  detail::check_finite(tp, out, "mul");
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    Tensor sa = a.detached(), sb = b.detached();
    out.node = tp.push_node([an, bn, n, sa, sb](Tape& t, const std::vector<double>& g) {
      if (an >= 0) {
        std::vector<double> ga(g.size());
        for (std::int64_t i = 0; i < n; ++i) ga[i] = g[i] * sb[i];
        t.accum(an, ga.data(), n);
      }
      if (bn >= 0) {
        std::vector<double> gb(g.size());
        for (std::int64_t i = 0; i < n; ++i) gb[i] = g[i] * sa[i];
        t.accum(bn, gb.data(), n);
      }
    }, out.shape);
  }
  return out;
}

inline Tensor mul_scalar(Tape& tp, const Tensor& a, double s) {
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * s;
  detail::check_finite(tp, out, "mul_scalar");
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    out.node = tp.push_node([an, s, n](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(g.size());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = g[i] * s;
      t.accum(an, ga.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor add_scalar(Tape& tp, const Tensor& a, double s) {
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + s;
  detail::check_finite(tp, out, "add_scalar");
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    out.node = tp.push_node([an, n](Tape& t, const std::vector<double>& g) {
      t.accum(an, g.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor relu(Tape& tp, const Tensor& a) {
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  detail::check_finite(tp, out, "relu");
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    Tensor sa = a.detached();
    out.node = tp.push_node([an, n, sa](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(g.size());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = sa[i] > 0.0 ? g[i] : 0.0;
      t.accum(an, ga.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor sigmoid(Tape& tp, const Tensor& a) {
  Tensor out(a.shape);
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double v = a[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  detail::check_finite(tp, out, "sigmoid");
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    Tensor sy = out.detached();
    out.node = tp.push_node([an, n, sy](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(g.size());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = g[i] * sy[i] * (1.0 - sy[i]);
      t.accum(an, ga.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor sum_all(Tape& tp, const Tensor& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
  Tensor out = Tensor::scalar(s);
  detail::check_finite(tp, out, "sum_all");
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    std::int64_t n = a.numel();
    out.node = tp.push_node([an, n](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(static_cast<std::size_t>(n), g[0]);
      t.accum(an, ga.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor mean_all(Tape& tp, const Tensor& a) {
  return mul_scalar(tp, sum_all(tp, a), 1.0 / static_cast<double>(a.numel()));
}

// Mean of squared differences.
inline Tensor mse_loss(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw DimensionError("mse_loss: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::int64_t n = a.numel();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  detail::check_finite(tp, out, "mse_loss");
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    Tensor sa = a.detached(), sb = b.detached();
    out.node = tp.push_node([an, bn, n, sa, sb](Tape& t, const std::vector<double>& g) {
      const double c = 2.0 * g[0] / static_cast<double>(n);
      if (an >= 0) {
        std::vector<double> ga(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) ga[i] = c * (sa[i] - sb[i]);
        t.accum(an, ga.data(), n);
      }
      if (bn >= 0) {
        std::vector<double> gb(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) gb[i] = c * (sb[i] - sa[i]);
        t.accum(bn, gb.data(), n);
      }
    }, out.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tp, const Tensor& a, std::vector<int> shp) {
  if (numel_of(shp) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape) + " to " + shape_str(shp));
  Tensor out;
  out.shape = std::move(shp);
  out.data = a.data;  // same storage; ops never mutate their outputs
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    std::int64_t n = a.numel();
    out.node = tp.push_node([an, n](Tape& t, const std::vector<double>& g) {
      t.accum(an, g.data(), n);
    }, out.shape);
  }
  return out;
}

inline Tensor transpose2d(Tape& tp, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d needs rank 2, got " + shape_str(a.shape));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(j, i) = a.at2(i, j);
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    out.node = tp.push_node([an, m, n](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(static_cast<std::size_t>(m) * n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) ga[static_cast<std::size_t>(i) * n + j] = g[static_cast<std::size_t>(j) * m + i];
      t.accum(an, ga.data(), static_cast<std::int64_t>(m) * n);
    }, out.shape);
  }
  return out;
}

inline Tensor slice_cols(Tape& tp, const Tensor& a, int c0, int c1) {
  if (a.rank() != 2) throw DimensionError("slice_cols needs rank 2");
  if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) throw ArgumentError("slice_cols: bad range");
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  Tensor out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at2(i, j) = a.at2(i, c0 + j);
  if (tp.recording && a.node >= 0) {
    int an = a.node;
    out.node = tp.push_node([an, m, n, w, c0](Tape& t, const std::vector<double>& g) {
      std::vector<double> ga(static_cast<std::size_t>(m) * n, 0.0);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<std::size_t>(i) * n + c0 + j] = g[static_cast<std::size_t>(i) * w + j];
      t.accum(an, ga.data(), static_cast<std::int64_t>(m) * n);
    }, out.shape);
  }
  return out;
}

inline Tensor concat_cols(Tape& tp, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: empty");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw DimensionError("concat_cols: row mismatch");
    n += p.dim(1);
  }
  Tensor out({m, n});
  int off = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.dim(1); ++j) out.at2(i, off + j) = p.at2(i, j);
    off += p.dim(1);
  }
  bool tracked = false;
  for (const Tensor& p : parts) tracked = tracked || p.node >= 0;
  if (tp.recording && tracked) {
    std::vector<int> nodes;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node);
      widths.push_back(p.dim(1));
    }
    out.node = tp.push_node([nodes, widths, m, n](Tape& t, const std::vector<double>& g) {
      int off2 = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const int w = widths[k];
        if (nodes[k] >= 0) {
          std::vector<double> gp(static_cast<std::size_t>(m) * w);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) gp[static_cast<std::size_t>(i) * w + j] = g[static_cast<std::size_t>(i) * n + off2 + j];
          t.accum(nodes[k], gp.data(), static_cast<std::int64_t>(m) * w);
        }
        off2 += w;
      }
    }, out.shape);
  }
  return out;
}

// Concatenate (c,h,w) maps along the channel axis.
inline Tensor concat_channels(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor out({ca + cb, h, w});
  std::memcpy(out.ptr(), a.ptr(), sizeof(double) * a.numel());
  std::memcpy(out.ptr() + a.numel(), b.ptr(), sizeof(double) * b.numel());
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    std::int64_t na = a.numel(), nb = b.numel();
    out.node = tp.push_node([an, bn, na, nb](Tape& t, const std::vector<double>& g) {
      t.accum(an, g.data(), na);
      t.accum(bn, g.data() + na, nb);
    }, out.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tp, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  detail::mm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  detail::check_finite(tp, out, "matmul");
  if (tp.recording && detail::any_tracked({&a, &b})) {
    int an = a.node, bn = b.node;
    Tensor sa = a.detached(), sb = b.detached();
    out.node = tp.push_node([an, bn, m, k, n, sa, sb](Tape& t, const std::vector<double>& g) {
      if (an >= 0) {
        std::vector<double> ga(static_cast<std::size_t>(m) * k, 0.0);
        detail::mm_acc_nt(g.data(), sb.ptr(), ga.data(), m, n, k);  // dA = G * B^T
        t.accum(an, ga.data(), static_cast<std::int64_t>(m) * k);
      }
      if (bn >= 0) {
        std::vector<double> gb(static_cast<std::size_t>(k) * n, 0.0);
        detail::mm_acc_tn(sa.ptr(), g.data(), gb.data(), m, k, n);  // dB = A^T * G
        t.accum(bn, gb.data(), static_cast<std::int64_t>(k) * n);
      }
    }, out.shape);
  }
  return out;
}

// x: (n,c) rows, bias: (c). Adds bias to every row.
inline Tensor add_rowvec(Tape& tp, const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_rowvec: " + shape_str(x.shape) + " + " + shape_str(bias.shape));
  const int m = x.dim(0), c = x.dim(1);
  Tensor out(x.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) out.at2(i, j) = x.at2(i, j) + bias[j];
  detail::check_finite(tp, out, "add_rowvec");
  if (tp.recording && detail::any_tracked({&x, &bias})) {
    int xn = x.node, bn = bias.node;
    out.node = tp.push_node([xn, bn, m, c](Tape& t, const std::vector<double>& g) {
      t.accum(xn, g.data(), static_cast<std::int64_t>(m) * c);
      if (bn >= 0) {
        std::vector<double> gb(static_cast<std::size_t>(c), 0.0);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) gb[j] += g[static_cast<std::size_t>(i) * c + j];
        t.accum(bn, gb.data(), c);
      }
    }, out.shape);
  }
  return out;
}

// x: (c,h,w), bias: (c). Per-channel bias.
inline Tensor add_channel_bias(Tape& tp, const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: " + shape_str(x.shape) + " + " + shape_str(bias.shape));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor out(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double b = bias[ch];
    const double* src = x.ptr() + ch * hw;
    double* dst = out.ptr() + ch * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
  }
  detail::check_finite(tp, out, "add_channel_bias");
  if (tp.recording && detail::any_tracked({&x, &bias})) {
    int xn = x.node, bn = bias.node;
    out.node = tp.push_node([xn, bn, c, hw](Tape& t, const std::vector<double>& g) {
      t.accum(xn, g.data(), c * hw);
      if (bn >= 0) {
        std::vector<double> gb(static_cast<std::size_t>(c), 0.0);
        for (int ch = 0; ch < c; ++ch) {
          const double* gp = g.data() + ch * hw;
          for (std::int64_t i = 0; i < hw; ++i) gb[ch] += gp[i];
        }
        t.accum(bn, gb.data(), c);
      }
    }, out.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / dropout
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis`. Each slice sums to 1.
inline Tensor softmax(Tape& tp, const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ArgumentError("softmax: axis out of range");
  const int d = x.dim(axis);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor out(x.shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * d * inner + in;
      double mx = -1e300;
      for (int j = 0; j < d; ++j) mx = std::max(mx, x[base + j * inner]);
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      const double invs = 1.0 / sum;
      for (int j = 0; j < d; ++j) out[base + j * inner] *= invs;
    }
  }
  detail::check_finite(tp, out, "softmax");
  if (tp.recording && x.node >= 0) {
    int xn = x.node;
    Tensor sy = out.detached();
    out.node = tp.push_node([xn, sy, d, inner, outer](Tape& t, const std::vector<double>& g) {
      std::vector<double> gx(sy.data->size());
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * d * inner + in;
          double dot = 0.0;
          for (int j = 0; j < d; ++j) dot += g[base + j * inner] * sy[base + j * inner];
          for (int j = 0; j < d; ++j) {
            const std::int64_t idx = base + j * inner;
            gx[idx] = sy[idx] * (g[idx] - dot);
          }
        }
      }
      t.accum(xn, gx.data(), static_cast<std::int64_t>(gx.size()));
    }, out.shape);
  }
  return out;
}

// Per-row normalization over the last dim, then affine with gamma/beta.
inline Tensor layer_norm(Tape& tp, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const int c = x.dim(x.rank() - 1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: affine params must have " + std::to_string(c) + " elements");
  const std::int64_t rows = x.numel() / c;
  Tensor out(x.shape);
  std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= c;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (int j = 0; j < c; ++j) {
      const double h = (xr[j] - mean) * istd;
      xhat[r * c + j] = h;
      out[r * c + j] = gamma[j] * h + beta[j];
    }
  }
  detail::check_finite(tp, out, "layer_norm");
  if (tp.recording && detail::any_tracked({&x, &gamma, &beta})) {
    int xn = x.node, gn = gamma.node, bn = beta.node;
    Tensor sg = gamma.detached();
    out.node = tp.push_node([xn, gn, bn, rows, c, xhat, inv_std, sg](
                                    Tape& t, const std::vector<double>& g) {
      if (xn >= 0) {
        std::vector<double> gx(static_cast<std::size_t>(rows) * c);
        for (std::int64_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dy = g[r * c + j] * sg[j];
            m1 += dy;
            m2 += dy * xhat[r * c + j];
          }
          m1 /= c;
          m2 /= c;
          for (int j = 0; j < c; ++j) {
            const double dy = g[r * c + j] * sg[j];
            gx[r * c + j] = inv_std[r] * (dy - m1 - xhat[r * c + j] * m2);
          }
        }
        t.accum(xn, gx.data(), rows * c);
      }
      if (gn >= 0) {
        std::vector<double> gg(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < c; ++j) gg[j] += g[r * c + j] * xhat[r * c + j];
        t.accum(gn, gg.data(), c);
      }
      if (bn >= 0) {
        std::vector<double> gb(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < c; ++j) gb[j] += g[r * c + j];
        t.accum(bn, gb.data(), c);
      }
    }, out.shape);
  }
  return out;
}

// Inference mode is the identity. Training mode zeroes with probability
// `rate` and scales survivors by 1/(1-rate).
inline Tensor dropout(Tape& tp, const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ArgumentError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) {
    Tensor out = x;  // shares data; identity pass-through keeps the node
    return out;
  }
  const std::int64_t n = x.numel();
  const double scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  Tensor out(x.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    const double keep = rng.uniform() >= rate ? scale : 0.0;
    (*mask)[i] = keep;
    out[i] = x[i] * keep;
  }
  if (tp.recording && x.node >= 0) {
    int xn = x.node;
    out.node = tp.push_node([xn, n, mask](Tape& t, const std::vector<double>& g) {
      std::vector<double> gx(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) gx[i] = g[i] * (*mask)[i];
      t.accum(xn, gx.data(), n);
    }, out.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d / upsample
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int oh, int ow, double* col) {
  // col is (ci*kh*kw, oh*ow)
  const std::int64_t ocols = static_cast<std::int64_t>(oh) * ow;
  std::int64_t r = 0;
  for (int c = 0; c < ci; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        double* dst = col + r * ocols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) dst[static_cast<std::size_t>(oy) * ow + ox] = 0.0;
            continue;
          }
          const double* xrow = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[static_cast<std::size_t>(oy) * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : xrow[ix];
          }
        }
      }
    }
  }
}

inline void col2im_acc(const double* col, int ci, int h, int w, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* x) {
  const std::int64_t ocols = static_cast<std::int64_t>(oh) * ow;
  std::int64_t r = 0;
  for (int c = 0; c < ci; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const double* src = col + r * ocols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* xrow = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) xrow[ix] += src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation convention. Output spatial size must divide evenly:
// h' = (h + 2*pad - kh)/stride + 1.
inline Tensor conv2d(Tape& tp, const Tensor& x, const Tensor& kernel, int stride, int pad) {
  if (x.rank() != 3 || kernel.rank() != 4)
    throw DimensionError("conv2d: x must be (c,h,w), kernel (co,ci,kh,kw)");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kci != ci) throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape) + " vs " +
                                      shape_str(kernel.shape));
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel dims must be odd");
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0)
    throw DimensionError("conv2d: non-integral output size");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: empty output");

  const int krows = ci * kh * kw;
  const std::int64_t ocols = static_cast<std::int64_t>(oh) * ow;
  std::vector<double> col(static_cast<std::size_t>(krows) * ocols);
  detail::im2col(x.ptr(), ci, h, w, kh, kw, stride, pad, oh, ow, col.data());

  Tensor out({co, oh, ow});
  detail::mm_acc(kernel.ptr(), col.data(), out.ptr(), co, krows, static_cast<int>(ocols));
  detail::check_finite(tp, out, "conv2d");

  if (tp.recording && detail::any_tracked({&x, &kernel})) {
    int xn = x.node, kn = kernel.node;
    Tensor sx = x.detached(), sk = kernel.detached();
    out.node = tp.push_node([xn, kn, sx, sk, ci, h, w, co, kh, kw, stride, pad, oh, ow,
                                 krows, ocols](Tape& t, const std::vector<double>& g) {
      // Recompute the column matrix; cheaper than keeping it on the tape.
      std::vector<double> col2(static_cast<std::size_t>(krows) * ocols);
      detail::im2col(sx.ptr(), ci, h, w, kh, kw, stride, pad, oh, ow, col2.data());
      if (kn >= 0) {
        std::vector<double> gk(static_cast<std::size_t>(co) * krows, 0.0);
        detail::mm_acc_nt(g.data(), col2.data(), gk.data(), co, static_cast<int>(ocols), krows);
        t.accum(kn, gk.data(), static_cast<std::int64_t>(co) * krows);
      }
      if (xn >= 0) {
        std::vector<double> gcol(static_cast<std::size_t>(krows) * ocols, 0.0);
        detail::mm_acc_tn(sk.ptr(), g.data(), gcol.data(), co, krows, static_cast<int>(ocols));
        std::vector<double> gx(static_cast<std::size_t>(ci) * h * w, 0.0);
        detail::col2im_acc(gcol.data(), ci, h, w, kh, kw, stride, pad, oh, ow, gx.data());
        t.accum(xn, gx.data(), static_cast<std::int64_t>(ci) * h * w);
      }
    }, out.shape);
  }
  return out;
}

// Each pixel replicated factor x factor; gradient sums over replicas.
inline Tensor upsample_nearest(Tape& tp, const Tensor& x, int factor) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest: x must be (c,h,w)");
  if (factor < 1) throw ArgumentError("upsample_nearest: factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h * factor, ow = w * factor;
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y) {
      const double* src = x.ptr() + (static_cast<std::size_t>(ch) * h + y / factor) * w;
      double* dst = out.ptr() + (static_cast<std::size_t>(ch) * oh + y) * ow;
      for (int xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
    }
  if (tp.recording && x.node >= 0) {
    int xn = x.node;
    out.node = tp.push_node([xn, c, h, w, factor, oh, ow](Tape& t, const std::vector<double>& g) {
      std::vector<double> gx(static_cast<std::size_t>(c) * h * w, 0.0);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
          const double* gp = g.data() + (static_cast<std::size_t>(ch) * oh + y) * ow;
          double* dst = gx.data() + (static_cast<std::size_t>(ch) * h + y / factor) * w;
          for (int xx = 0; xx < ow; ++xx) dst[xx / factor] += gp[xx];
        }
      t.accum(xn, gx.data(), static_cast<std::int64_t>(c) * h * w);
    }, out.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian maps (differentiable w.r.t. the center coordinates)
// ---------------------------------------------------------------------------

// kps: (k,2) rows of (y,x) in heatmap pixel coords. Channel j is
// exp(-((y-y_j)^2+(x-x_j)^2)/(2 sigma^2)), peak value 1 at the center.
inline Tensor gaussian_maps(Tape& tp, const Tensor& kps, double sigma, int h, int w) {
  if (kps.rank() != 2 || kps.dim(1) != 2) throw DimensionError("gaussian_maps: kps must be (k,2)");
  if (sigma <= 0.0) throw ArgumentError("gaussian_maps: sigma must be > 0");
  const int k = kps.dim(0);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  Tensor out({k, h, w});
  for (int j = 0; j < k; ++j) {
    const double cy = kps.at2(j, 0), cx = kps.at2(j, 1);
    double* dst = out.ptr() + static_cast<std::size_t>(j) * h * w;
    for (int y = 0; y < h; ++y) {
      const double dy = y - cy;
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx;
        dst[static_cast<std::size_t>(y) * w + x] = std::exp(-(dy * dy + dx * dx) * inv2s2);
      }
    }
  }
  detail::check_finite(tp, out, "gaussian_maps");
  if (tp.recording && kps.node >= 0) {
    int kn = kps.node;
    Tensor skps = kps.detached(), sout = out.detached();
    const double invs2 = 1.0 / (sigma * sigma);
    out.node = tp.push_node([kn, skps, sout, k, h, w, invs2](Tape& t,
                                                                 const std::vector<double>& g) {
      std::vector<double> gk(static_cast<std::size_t>(k) * 2, 0.0);
      for (int j = 0; j < k; ++j) {
        const double cy = skps.at2(j, 0), cx = skps.at2(j, 1);
        const double* ov = sout.ptr() + static_cast<std::size_t>(j) * h * w;
        const double* gv = g.data() + static_cast<std::size_t>(j) * h * w;
        double gy = 0.0, gx = 0.0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double v = ov[static_cast<std::size_t>(y) * w + x] *
                             gv[static_cast<std::size_t>(y) * w + x];
            gy += v * (y - cy) * invs2;
            gx += v * (x - cx) * invs2;
          }
        gk[static_cast<std::size_t>(j) * 2 + 0] = gy;
        gk[static_cast<std::size_t>(j) * 2 + 1] = gx;
      }
      t.accum(kn, gk.data(), static_cast<std::int64_t>(k) * 2);
    }, out.shape);
  }
  return out;
}

}  // namespace ttpk
