#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Conventions that the rest of the library relies on:
//  - all storage is row-major, all reductions run in a fixed sequential
//    order, so identical inputs give bit-identical outputs;
//  - a Tensor is a shared handle; values are treated as immutable once
//    created except for in-place optimizer updates between tape lifetimes;
//  - ops record backward closures only while a Tape is active and not
//    paused, so anything built outside a tape (or under Tape::Pause) is a
//    detached constant;
//  - every op checks its output for NaN/Inf and throws instead of letting
//    non-finite values propagate.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ett {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace kern {

// c[m,n] += a[m,k] @ b[k,n]
inline void mm_nn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + size_t(i) * k;
    double* crow = c + size_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + size_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k,n] += a^T[k,m] @ b[m,n] where a is stored [m,k]
inline void mm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + size_t(i) * k;
    const double* brow = b + size_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* crow = c + size_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void transpose(const double* a, double* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[size_t(j) * rows + i] = a[size_t(i) * cols + j];
}

}  // namespace kern

struct TensorData {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value.assign(count(d->shape), 0.0);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor from(std::vector<int> shape, std::vector<double> value,
                     bool requires_grad = false) {
    if (value.size() != count(shape))
      throw TensorError("Tensor::from: value size does not match shape");
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(value);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return int(d_->shape.size()); }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  size_t size() const { return d_->value.size(); }

  // Tensor is a shared handle: accessors are const and hand out mutable
  // views of the shared storage, in the style of other tensor libraries.
  double* data() const { return d_->value.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) const { d_->requires_grad = rg; }

  // Gradient buffer, zero-initialized on first touch.
  double* grad() const {
    if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad.data();
  }
  const std::vector<double>& grad_vector() const {
    grad();
    return d_->grad;
  }
  bool grad_allocated() const { return d_->grad.size() == d_->value.size(); }

  void zero_grad() const {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  double item() const {
    if (size() != 1) throw TensorError("Tensor::item: tensor is not a scalar");
    return d_->value[0];
  }

  double at(std::initializer_list<int> idx) const {
    return d_->value[offset(idx)];
  }

  Tensor clone() const {
    return from(d_->shape, d_->value, false);
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  static size_t count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int s : shape) {
      if (s < 0) throw TensorError("Tensor: negative dimension");
      n *= size_t(s);
    }
    return n;
  }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  size_t offset(std::initializer_list<int> idx) const {
    if (idx.size() != d_->shape.size()) throw TensorError("Tensor::at: rank mismatch");
    size_t off = 0;
    size_t k = 0;
    for (int i : idx) {
      off = off * size_t(d_->shape[k]) + size_t(i);
      ++k;
    }
    return off;
  }

  std::shared_ptr<TensorData> d_;
};

// Records backward closures in creation order; backward() replays them in
// reverse, which is a valid topological order of the graph.
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current_; }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  void backward(Tensor loss) {
    if (loss.size() != 1) throw TensorError("Tape::backward: loss must be scalar");
    if (!loss.requires_grad())
      throw TensorError("Tape::backward: loss does not depend on any trainable tensor");
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  // Suspends recording; ops created under a Pause return detached constants.
  class Pause {
   public:
    Pause() : saved_(current_) { current_ = nullptr; }
    ~Pause() { current_ = saved_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* saved_;
  };

 private:
  std::vector<std::function<void()>> ops_;
  Tape* prev_;
  static thread_local Tape* current_;
};

inline thread_local Tape* Tape::current_ = nullptr;

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  const double* p = t.data();
  for (size_t i = 0, n = t.size(); i < n; ++i) {
    if (!std::isfinite(p[i]))
      throw TensorError(std::string(op) + ": non-finite value in output");
  }
}

inline bool tracing() { return Tape::active() != nullptr; }

inline bool grad_flows(const Tensor& t) { return tracing() && t.requires_grad(); }

// Marks `out` as gradient-carrying and records `fn` if any input needs it.
inline void record(Tensor& out, bool any_input_grad, std::function<void()> fn) {
  if (tracing() && any_input_grad) {
    out.set_requires_grad(true);
    Tape::active()->record(std::move(fn));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw TensorError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) po[i] = pa[i] + pb[i];
  detail::check_finite(out, "add");
  bool ga = detail::grad_flows(a), gb = detail::grad_flows(b);
  detail::record(out, ga || gb, [a, b, out, ga, gb]() mutable {
    double* g = out.grad();
    if (ga) {
      double* da = a.grad();
      for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += g[i];
    }
    if (gb) {
      double* db = b.grad();
      for (size_t i = 0, n = b.size(); i < n; ++i) db[i] += g[i];
    }
  });
  return out;
}

// a + alpha * b
inline Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha) {
  detail::require_same_shape(a, b, "add_scaled");
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) po[i] = pa[i] + alpha * pb[i];
  detail::check_finite(out, "add_scaled");
  bool ga = detail::grad_flows(a), gb = detail::grad_flows(b);
  detail::record(out, ga || gb, [a, b, out, ga, gb, alpha]() mutable {
    double* g = out.grad();
    if (ga) {
      double* da = a.grad();
      for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += g[i];
    }
    if (gb) {
      double* db = b.grad();
      for (size_t i = 0, n = b.size(); i < n; ++i) db[i] += alpha * g[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, -1.0); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) po[i] = pa[i] * pb[i];
  detail::check_finite(out, "mul");
  bool ga = detail::grad_flows(a), gb = detail::grad_flows(b);
  detail::record(out, ga || gb, [a, b, out, ga, gb]() mutable {
    double* g = out.grad();
    if (ga) {
      double* da = a.grad();
      const double* pb2 = b.data();
      for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += g[i] * pb2[i];
    }
    if (gb) {
      double* db = b.grad();
      const double* pa2 = a.data();
      for (size_t i = 0, n = b.size(); i < n; ++i) db[i] += g[i] * pa2[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) po[i] = s * pa[i];
  detail::check_finite(out, "scale");
  bool ga = detail::grad_flows(a);
  detail::record(out, ga, [a, out, s]() mutable {
    double* g = out.grad();
    double* da = a.grad();
    for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += s * g[i];
  });
  return out;
}

inline Tensor log_elem(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) {
    if (pa[i] <= 0.0) throw TensorError("log_elem: non-positive input");
    po[i] = std::log(pa[i]);
  }
  detail::check_finite(out, "log_elem");
  bool ga = detail::grad_flows(a);
  detail::record(out, ga, [a, out]() mutable {
    double* g = out.grad();
    double* da = a.grad();
    const double* pa2 = a.data();
    for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += g[i] / pa2[i];
  });
  return out;
}

// Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (size_t i = 0, n = a.size(); i < n; ++i)
    po[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
  detail::check_finite(out, "gelu");
  bool ga = detail::grad_flows(a);
  detail::record(out, ga, [a, out]() mutable {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    constexpr double inv_sqrt2l = 0.70710678118654752440;
    double* g = out.grad();
    double* da = a.grad();
    const double* pa2 = a.data();
    for (size_t i = 0, n = a.size(); i < n; ++i) {
      double x = pa2[i];
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2l));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      da[i] += g[i] * (cdf + x * pdf);
    }
  });
  return out;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  const double* pa = a.data();
  for (size_t i = 0, n = a.size(); i < n; ++i) s += pa[i];
  Tensor out = Tensor::scalar(s);
  detail::check_finite(out, "sum");
  bool ga = detail::grad_flows(a);
  detail::record(out, ga, [a, out]() mutable {
    double g = out.grad()[0];
    double* da = a.grad();
    for (size_t i = 0, n = a.size(); i < n; ++i) da[i] += g;
  });
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw TensorError("mean_all: empty tensor");
  return scale(sum(a), 1.0 / double(a.size()));
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw TensorError("matmul: rank-2 tensors required");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw TensorError("matmul: inner dimensions disagree");
  Tensor out = Tensor::zeros({m, n});
  kern::mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  detail::check_finite(out, "matmul");
  bool ga = detail::grad_flows(a), gb = detail::grad_flows(b);
  detail::record(out, ga || gb, [a, b, out, ga, gb, m, k, n]() mutable {
    const double* g = out.grad();
    if (ga) {
      // dA[m,k] = dC[m,n] @ B^T[n,k]; transpose B once so the kernel streams rows.
      std::vector<double> bt(size_t(k) * n);
      kern::transpose(b.data(), bt.data(), k, n);
      kern::mm_nn_acc(g, bt.data(), a.grad(), m, n, k);
    }
    if (gb) kern::mm_tn_acc(a.data(), g, b.grad(), m, k, n);
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw TensorError("transpose: rank-2 tensor required");
  int r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  kern::transpose(a.data(), out.data(), r, c);
  bool ga = detail::grad_flows(a);
  detail::record(out, ga, [a, out, r, c]() mutable {
    const double* g = out.grad();
    double* da = a.grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) da[size_t(i) * c + j] += g[size_t(j) * r + i];
  });
  return out;
}

// x[r,c] + v[c] broadcast over rows
inline Tensor row_broadcast_add(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1) throw TensorError("row_broadcast_add: need [r,c] and [c]");
  int r = x.dim(0), c = x.dim(1);
  if (v.dim(0) != c) throw TensorError("row_broadcast_add: width mismatch");
  Tensor out = Tensor::zeros({r, c});
  const double* px = x.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[size_t(i) * c + j] = px[size_t(i) * c + j] + pv[j];
  detail::check_finite(out, "row_broadcast_add");
  bool gx = detail::grad_flows(x), gv = detail::grad_flows(v);
  detail::record(out, gx || gv, [x, v, out, gx, gv, r, c]() mutable {
    const double* g = out.grad();
    if (gx) {
      double* dx = x.grad();
      for (size_t i = 0, n = size_t(r) * c; i < n; ++i) dx[i] += g[i];
    }
    if (gv) {
      double* dv = v.grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) dv[j] += g[size_t(i) * c + j];
    }
  });
  return out;
}

// x[r,c] * v[c] broadcast over rows
inline Tensor row_broadcast_mul(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1) throw TensorError("row_broadcast_mul: need [r,c] and [c]");
  int r = x.dim(0), c = x.dim(1);
  if (v.dim(0) != c) throw TensorError("row_broadcast_mul: width mismatch");
  Tensor out = Tensor::zeros({r, c});
  const double* px = x.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[size_t(i) * c + j] = px[size_t(i) * c + j] * pv[j];
  detail::check_finite(out, "row_broadcast_mul");
  bool gx = detail::grad_flows(x), gv = detail::grad_flows(v);
  detail::record(out, gx || gv, [x, v, out, gx, gv, r, c]() mutable {
    const double* g = out.grad();
    if (gx) {
      double* dx = x.grad();
      const double* pv2 = v.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) dx[size_t(i) * c + j] += g[size_t(i) * c + j] * pv2[j];
    }
    if (gv) {
      double* dv = v.grad();
      const double* px2 = x.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) dv[j] += g[size_t(i) * c + j] * px2[size_t(i) * c + j];
    }
  });
  return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 2) throw TensorError("gather_rows: rank-2 tensor required");
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({int(rows.size()), c});
  const double* px = x.data();
  double* po = out.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    int src = rows[i];
    if (src < 0 || src >= r) throw TensorError("gather_rows: row index out of range");
    std::memcpy(po + i * size_t(c), px + size_t(src) * c, size_t(c) * sizeof(double));
  }
  bool gx = detail::grad_flows(x);
  detail::record(out, gx, [x, out, rows, c]() mutable {
    const double* g = out.grad();
    double* dx = x.grad();
    for (size_t i = 0; i < rows.size(); ++i) {
      double* drow = dx + size_t(rows[i]) * c;
      const double* grow = g + i * size_t(c);
      for (int j = 0; j < c; ++j) drow[j] += grow[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization and probability

// Row-wise over the last axis for rank-2, whole vector for rank-1.
// axis 0 on a rank-2 tensor normalizes columns.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  if (x.rank() == 1) {
    if (axis != -1 && axis != 0) throw TensorError("softmax: bad axis for rank-1");
  } else if (x.rank() == 2) {
    if (axis == 0) return transpose(softmax(transpose(x), 1));
    if (axis != -1 && axis != 1) throw TensorError("softmax: bad axis for rank-2");
  } else {
    throw TensorError("softmax: rank-1 or rank-2 tensor required");
  }
  int rows = x.rank() == 2 ? x.dim(0) : 1;
  int cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  if (cols == 0) throw TensorError("softmax: empty axis");
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < rows; ++i) {
    const double* xr = px + size_t(i) * cols;
    double* orow = po + size_t(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < cols; ++j) orow[j] /= s;
  }
  detail::check_finite(out, "softmax");
  bool gx = detail::grad_flows(x);
  detail::record(out, gx, [x, out, rows, cols]() mutable {
    const double* g = out.grad();
    const double* p = out.data();
    double* dx = x.grad();
    for (int i = 0; i < rows; ++i) {
      const double* gr = g + size_t(i) * cols;
      const double* pr = p + size_t(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += gr[j] * pr[j];
      double* dr = dx + size_t(i) * cols;
      for (int j = 0; j < cols; ++j) dr[j] += pr[j] * (gr[j] - dot);
    }
  });
  return out;
}

// Row-wise layer normalization with affine parameters, eps inside the sqrt.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1)
    throw TensorError("layer_norm: need x[r,c], gain[c], bias[c]");
  int r = x.dim(0), c = x.dim(1);
  if (gain.dim(0) != c || bias.dim(0) != c) throw TensorError("layer_norm: width mismatch");
  Tensor out = Tensor::zeros({r, c});
  // xhat kept for backward; shared with the closure below.
  auto xhat = std::make_shared<std::vector<double>>(size_t(r) * c);
  auto inv_sigma = std::make_shared<std::vector<double>>(size_t(r));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    const double* xr = px + size_t(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double dv = xr[j] - mu;
      var += dv * dv;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[size_t(i)] = inv;
    double* hr = xhat->data() + size_t(i) * c;
    double* orow = po + size_t(i) * c;
    for (int j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mu) * inv;
      orow[j] = hr[j] * pg[j] + pb[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  bool gx = detail::grad_flows(x), gg = detail::grad_flows(gain), gb = detail::grad_flows(bias);
  detail::record(out, gx || gg || gb,
                 [x, gain, bias, out, xhat, inv_sigma, gx, gg, gb, r, c]() mutable {
    const double* g = out.grad();
    const double* pg2 = gain.data();
    for (int i = 0; i < r; ++i) {
      const double* gr = g + size_t(i) * c;
      const double* hr = xhat->data() + size_t(i) * c;
      if (gg) {
        double* dg = gain.grad();
        for (int j = 0; j < c; ++j) dg[j] += gr[j] * hr[j];
      }
      if (gb) {
        double* db = bias.grad();
        for (int j = 0; j < c; ++j) db[j] += gr[j];
      }
      if (gx) {
        double inv = (*inv_sigma)[size_t(i)];
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int j = 0; j < c; ++j) {
          double dh = gr[j] * pg2[j];
          mean_dh += dh;
          mean_dh_h += dh * hr[j];
        }
        mean_dh /= c;
        mean_dh_h /= c;
        double* dx = x.grad() + size_t(i) * c;
        for (int j = 0; j < c; ++j) {
          double dh = gr[j] * pg2[j];
          dx[j] += inv * (dh - mean_dh - hr[j] * mean_dh_h);
        }
      }
    }
  });
  return out;
}

// y_i = x_i / ||x_i||. Errors on a zero-norm row so the cosine head can rely
// on well-defined directions.
inline Tensor row_l2_normalize(const Tensor& x) {
  if (x.rank() != 2) throw TensorError("row_l2_normalize: rank-2 tensor required");
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r, c});
  auto inv_norm = std::make_shared<std::vector<double>>(size_t(r));
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    const double* xr = px + size_t(i) * c;
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += xr[j] * xr[j];
    if (s == 0.0) throw TensorError("row_l2_normalize: zero-norm row");
    double inv = 1.0 / std::sqrt(s);
    (*inv_norm)[size_t(i)] = inv;
    double* orow = po + size_t(i) * c;
    for (int j = 0; j < c; ++j) orow[j] = xr[j] * inv;
  }
  detail::check_finite(out, "row_l2_normalize");
  bool gx = detail::grad_flows(x);
  detail::record(out, gx, [x, out, inv_norm, r, c]() mutable {
    const double* g = out.grad();
    const double* py = out.data();
    double* dx = x.grad();
    for (int i = 0; i < r; ++i) {
      const double* gr = g + size_t(i) * c;
      const double* yr = py + size_t(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
      double inv = (*inv_norm)[size_t(i)];
      double* dr = dx + size_t(i) * c;
      for (int j = 0; j < c; ++j) dr[j] += inv * (gr[j] - yr[j] * dot);
    }
  });
  return out;
}

// Cosine similarity of two vectors, clamped to [-1, 1].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) throw TensorError("cosine_similarity: rank-1 required");
  detail::require_same_shape(a, b, "cosine_similarity");
  int n = a.dim(0);
  const double* pa = a.data();
  const double* pb = b.data();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < n; ++i) {
    dot += pa[i] * pb[i];
    na += pa[i] * pa[i];
    nb += pb[i] * pb[i];
  }
  if (na == 0.0 || nb == 0.0) throw TensorError("cosine_similarity: zero-norm input");
  double inv = 1.0 / (std::sqrt(na) * std::sqrt(nb));
  double c = dot * inv;
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  Tensor out = Tensor::scalar(c);
  bool ga = detail::grad_flows(a), gb = detail::grad_flows(b);
  detail::record(out, ga || gb, [a, b, out, ga, gb, inv, na, nb, c, n]() mutable {
    double g = out.grad()[0];
    const double* pa2 = a.data();
    const double* pb2 = b.data();
    if (ga) {
      double* da = a.grad();
      for (int i = 0; i < n; ++i) da[i] += g * (pb2[i] * inv - c * pa2[i] / na);
    }
    if (gb) {
      double* db = b.grad();
      for (int i = 0; i < n; ++i) db[i] += g * (pa2[i] * inv - c * pb2[i] / nb);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// losses

// Mean of -log(probs[i, labels[i]]). Inputs are probability rows.
inline Tensor nll_loss(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw TensorError("nll_loss: rank-2 probabilities required");
  int r = probs.dim(0), c = probs.dim(1);
  if (int(labels.size()) != r) throw TensorError("nll_loss: label count mismatch");
  const double* pp = probs.data();
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    int y = labels[i];
    if (y < 0 || y >= c) throw TensorError("nll_loss: label out of range");
    double p = pp[size_t(i) * c + y];
    if (p <= 0.0) throw TensorError("nll_loss: zero probability at true label");
    total += -std::log(p);
  }
  Tensor out = Tensor::scalar(total / r);
  detail::check_finite(out, "nll_loss");
  bool gp = detail::grad_flows(probs);
  detail::record(out, gp, [probs, out, labels, r, c]() mutable {
    double g = out.grad()[0];
    const double* pp2 = probs.data();
    double* dp = probs.grad();
    for (int i = 0; i < r; ++i) {
      int y = labels[i];
      dp[size_t(i) * c + y] += -g / (r * pp2[size_t(i) * c + y]);
    }
  });
  return out;
}

// Mean cross entropy of softmax(logits) against integer labels, fused for
// numerical stability with unbounded logits.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw TensorError("softmax_cross_entropy: rank-2 logits required");
  int r = logits.dim(0), c = logits.dim(1);
  if (int(labels.size()) != r) throw TensorError("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(size_t(r) * c);
  const double* pl = logits.data();
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    int y = labels[i];
    if (y < 0 || y >= c) throw TensorError("softmax_cross_entropy: label out of range");
    const double* row = pl + size_t(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    double* pr = probs->data() + size_t(i) * c;
    for (int j = 0; j < c; ++j) {
      pr[j] = std::exp(row[j] - mx);
      s += pr[j];
    }
    for (int j = 0; j < c; ++j) pr[j] /= s;
    total += -(row[y] - mx - std::log(s));
  }
  Tensor out = Tensor::scalar(total / r);
  detail::check_finite(out, "softmax_cross_entropy");
  bool gl = detail::grad_flows(logits);
  detail::record(out, gl, [logits, out, probs, labels, r, c]() mutable {
    double g = out.grad()[0] / r;
    double* dl = logits.grad();
    for (int i = 0; i < r; ++i) {
      const double* pr = probs->data() + size_t(i) * c;
      double* dr = dl + size_t(i) * c;
      for (int j = 0; j < c; ++j) dr[j] += g * pr[j];
      dr[labels[i]] -= g;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// multi-head attention over a batch of equal-length token sequences

struct AttentionCapture {
  bool want_probs = false;       // post-softmax [batch, heads, tokens, keys]
  bool want_cls_scores = false;  // pre-softmax row of token 0 vs patch keys
  Tensor probs;
  Tensor cls_scores;  // [batch, heads, tokens-1]
};

// q, k, v: [batch*tokens, width]. Optional prefix_k/prefix_v: [n_prefix, width],
// shared by every sequence in the batch; their columns split across heads the
// same way as ordinary keys, and they join the same softmax at the same
// 1/sqrt(width/heads) scaling. Output: [batch*tokens, width].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const Tensor* prefix_k, const Tensor* prefix_v,
                        int batch, int tokens, int heads,
                        AttentionCapture* cap = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw TensorError("attention: rank-2 q/k/v required");
  int width = q.dim(1);
  if (k.dim(1) != width || v.dim(1) != width) throw TensorError("attention: width mismatch");
  if (q.dim(0) != batch * tokens || k.dim(0) != batch * tokens || v.dim(0) != batch * tokens)
    throw TensorError("attention: row count must equal batch*tokens");
  if (width % heads != 0) throw TensorError("attention: heads must divide width");
  if ((prefix_k == nullptr) != (prefix_v == nullptr))
    throw TensorError("attention: prefix keys and values must come together");
  int n_prefix = 0;
  if (prefix_k) {
    if (prefix_k->rank() != 2 || prefix_v->rank() != 2 || prefix_k->dim(1) != width ||
        prefix_v->dim(1) != width || prefix_k->dim(0) != prefix_v->dim(0))
      throw TensorError("attention: bad prefix shape");
    n_prefix = prefix_k->dim(0);
  }
  const int dh = width / heads;
  const int keys = tokens + n_prefix;
  const double sc = 1.0 / std::sqrt(double(dh));

  Tensor out = Tensor::zeros({batch * tokens, width});
  auto probs = std::make_shared<std::vector<double>>(size_t(batch) * heads * tokens * keys);

  const double* pq = q.data();
  const double* pk = k.data();
  const double* pv = v.data();
  const double* ppk = prefix_k ? prefix_k->data() : nullptr;
  const double* ppv = prefix_v ? prefix_v->data() : nullptr;
  double* po = out.data();

  std::vector<double> row(size_t(keys), 0.0);
  for (int b = 0; b < batch; ++b) {
    const size_t base = size_t(b) * tokens;
    for (int h = 0; h < heads; ++h) {
      const int col = h * dh;
      for (int t = 0; t < tokens; ++t) {
        const double* qrow = pq + (base + size_t(t)) * width + col;
        // scores over the sequence's own keys, then the shared prefix keys
        for (int j = 0; j < tokens; ++j) {
          const double* krow = pk + (base + size_t(j)) * width + col;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          row[size_t(j)] = s * sc;
        }
        for (int j = 0; j < n_prefix; ++j) {
          const double* krow = ppk + size_t(j) * width + col;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          row[size_t(tokens + j)] = s * sc;
        }
        double mx = row[0];
        for (int j = 1; j < keys; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < keys; ++j) {
          row[size_t(j)] = std::exp(row[size_t(j)] - mx);
          sum += row[size_t(j)];
        }
        double* prow = probs->data() +
                       ((size_t(b) * heads + h) * tokens + size_t(t)) * keys;
        for (int j = 0; j < keys; ++j) prow[j] = row[size_t(j)] / sum;
        // context = probs @ [V; prefix_v]
        double* orow = po + (base + size_t(t)) * width + col;
        for (int j = 0; j < tokens; ++j) {
          const double* vrow = pv + (base + size_t(j)) * width + col;
          const double p = prow[j];
          for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
        for (int j = 0; j < n_prefix; ++j) {
          const double* vrow = ppv + size_t(j) * width + col;
          const double p = prow[tokens + j];
          for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  }
  detail::check_finite(out, "attention");

  if (cap) {
    if (cap->want_probs) {
      cap->probs = Tensor::from({batch, heads, tokens, keys}, *probs);
    }
    if (cap->want_cls_scores) {
      // Pre-softmax scores of each sequence's token 0 against its own
      // non-class keys; prefix keys are excluded by construction.
      Tensor cs = Tensor::zeros({batch, heads, tokens - 1});
      double* pc = cs.data();
      for (int b = 0; b < batch; ++b) {
        const size_t base = size_t(b) * tokens;
        for (int h = 0; h < heads; ++h) {
          const int col = h * dh;
          const double* qrow = pq + base * width + col;
          for (int j = 1; j < tokens; ++j) {
            const double* krow = pk + (base + size_t(j)) * width + col;
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += qrow[c] * krow[c];
            pc[(size_t(b) * heads + h) * (tokens - 1) + size_t(j) - 1] = s * sc;
          }
        }
      }
      cap->cls_scores = cs;
    }
  }

  bool gq = detail::grad_flows(q), gk = detail::grad_flows(k), gv = detail::grad_flows(v);
  bool gpk = prefix_k && detail::grad_flows(*prefix_k);
  bool gpv = prefix_v && detail::grad_flows(*prefix_v);
  Tensor pkt = prefix_k ? *prefix_k : Tensor();
  Tensor pvt = prefix_v ? *prefix_v : Tensor();
  detail::record(out, gq || gk || gv || gpk || gpv,
                 [q, k, v, pkt, pvt, out, probs, gq, gk, gv, gpk, gpv, batch, tokens, heads,
                  dh, keys, sc, width, n_prefix]() mutable {
    const double* g = out.grad();
    const double* pq2 = q.data();
    const double* pk2 = k.data();
    const double* pv2 = v.data();
    const double* ppk2 = pkt.defined() ? pkt.data() : nullptr;
    const double* ppv2 = pvt.defined() ? pvt.data() : nullptr;
    double* dq = gq ? q.grad() : nullptr;
    double* dk = gk ? k.grad() : nullptr;
    double* dv = gv ? v.grad() : nullptr;
    double* dpk = gpk ? pkt.grad() : nullptr;
    double* dpv = gpv ? pvt.grad() : nullptr;
    std::vector<double> dprob(size_t(keys), 0.0);
    std::vector<double> dscore(size_t(keys), 0.0);
    for (int b = 0; b < batch; ++b) {
      const size_t base = size_t(b) * tokens;
      for (int h = 0; h < heads; ++h) {
        const int col = h * dh;
        for (int t = 0; t < tokens; ++t) {
          const double* grow = g + (base + size_t(t)) * width + col;
          const double* prow = probs->data() +
                               ((size_t(b) * heads + h) * tokens + size_t(t)) * keys;
          // d probs
          for (int j = 0; j < tokens; ++j) {
            const double* vrow = pv2 + (base + size_t(j)) * width + col;
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += grow[c] * vrow[c];
            dprob[size_t(j)] = s;
          }
          for (int j = 0; j < n_prefix; ++j) {
            const double* vrow = ppv2 + size_t(j) * width + col;
            double s = 0.0;
            for (int c = 0; c < dh; ++c) s += grow[c] * vrow[c];
            dprob[size_t(tokens + j)] = s;
          }
          // d values
          if (gv) {
            for (int j = 0; j < tokens; ++j) {
              double* vdst = dv + (base + size_t(j)) * width + col;
              const double p = prow[j];
              for (int c = 0; c < dh; ++c) vdst[c] += p * grow[c];
            }
          }
          if (gpv) {
            for (int j = 0; j < n_prefix; ++j) {
              double* vdst = dpv + size_t(j) * width + col;
              const double p = prow[tokens + j];
              for (int c = 0; c < dh; ++c) vdst[c] += p * grow[c];
            }
          }
          // softmax backward
          double dot = 0.0;
          for (int j = 0; j < keys; ++j) dot += dprob[size_t(j)] * prow[j];
          for (int j = 0; j < keys; ++j)
            dscore[size_t(j)] = prow[j] * (dprob[size_t(j)] - dot) * sc;
          // d queries and d keys
          const double* qrow = pq2 + (base + size_t(t)) * width + col;
          double* qdst = gq ? dq + (base + size_t(t)) * width + col : nullptr;
          for (int j = 0; j < tokens; ++j) {
            const double ds = dscore[size_t(j)];
            if (ds == 0.0) continue;
            const double* krow = pk2 + (base + size_t(j)) * width + col;
            if (gq)
              for (int c = 0; c < dh; ++c) qdst[c] += ds * krow[c];
            if (gk) {
              double* kdst = dk + (base + size_t(j)) * width + col;
              for (int c = 0; c < dh; ++c) kdst[c] += ds * qrow[c];
            }
          }
          for (int j = 0; j < n_prefix; ++j) {
            const double ds = dscore[size_t(tokens + j)];
            if (ds == 0.0) continue;
            const double* krow = ppk2 + size_t(j) * width + col;
            if (gq)
              for (int c = 0; c < dh; ++c) qdst[c] += ds * krow[c];
            if (gpk) {
              double* kdst = dpk + size_t(j) * width + col;
              for (int c = 0; c < dh; ++c) kdst[c] += ds * qrow[c];
            }
          }
        }
      }
    }
  });
  return out;
}

}  // namespace ett
