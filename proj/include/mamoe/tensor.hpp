// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense numeric kernel with reverse-mode differentiation.
//
// Tensors are rank-2 row-major arrays of a real scalar type (double by
// default, float behind a config switch). Operations come in pairs: a raw
// value kernel and a taped wrapper that records the backward closure on a
// Tape. backward() replays the closures in reverse and ACCUMULATES into
// .grad, so parameters must be zeroed between steps by their owner.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mamoe/errors.hpp"

namespace mamoe::numkit {

template <class T = double>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until ensure_grad()

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, T fill = T{})
      : shape{r, c}, data(r * c, fill) {}

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::size_t numel() const { return data.size(); }

  T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{});
  }
  void zero_grad() { grad.assign(data.size(), T{}); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <class T = double>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> make_tensor(std::size_t r, std::size_t c, T fill = T{}) {
  return std::make_shared<Tensor<T>>(r, c, fill);
}

template <class T>
TensorPtr<T> make_tensor(std::size_t r, std::size_t c, std::initializer_list<T> values) {
  auto t = make_tensor<T>(r, c);
  if (values.size() != t->numel())
    throw ShapeError("make_tensor: " + std::to_string(values.size()) +
                     " values for a " + std::to_string(r) + "x" + std::to_string(c) +
                     " tensor");
  std::copy(values.begin(), values.end(), t->data.begin());
  return t;
}

template <class T>
std::string shape_str(const Tensor<T>& t) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i)
    os << (i ? "x" : "") << t.shape[i];
  os << "]";
  return os.str();
}

/// Ordered record of primitive operations for reverse replay.
template <class T = double>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded closures in reverse.
  void backward(const TensorPtr<T>& loss) {
    if (loss->numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(*loss));
    loss->ensure_grad();
    loss->grad[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// ---------------------------------------------------------------------------
// Raw kernels (value level, no tape)
// ---------------------------------------------------------------------------

namespace detail {

// C += A[r x k] * B[k x c]
template <class T>
void mm_nn_acc(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A[r x k] * B^T, B is [c x k]
template <class T>
void mm_nt_acc(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A^T * B, A is [k x r], B is [k x c]
template <class T>
void mm_tn_acc(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * r;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < r; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Taped primitives
// ---------------------------------------------------------------------------

/// Standard matrix product a[r x k] * b[k x c].
template <class T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->cols() != b->rows())
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(*a) + " vs " +
                     shape_str(*b));
  const std::size_t r = a->rows(), k = a->cols(), n = b->cols();
  auto out = make_tensor<T>(r, n);
  detail::mm_nn_acc(a->data.data(), b->data.data(), out->data.data(), r, k, n);
  tape.record([a, b, out, r, k, n] {
    a->ensure_grad();
    b->ensure_grad();
    detail::mm_nt_acc(out->grad.data(), b->data.data(), a->grad.data(), r, n, k);
    detail::mm_tn_acc(a->data.data(), out->grad.data(), b->grad.data(), k, r, n);
  });
  return out;
}

/// a[r x k] * b^T where b is [c x k]; used for attention scores.
template <class T>
TensorPtr<T> matmul_nt(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->cols() != b->cols())
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(*a) + " vs " +
                     shape_str(*b));
  const std::size_t r = a->rows(), k = a->cols(), n = b->rows();
  auto out = make_tensor<T>(r, n);
  detail::mm_nt_acc(a->data.data(), b->data.data(), out->data.data(), r, k, n);
  tape.record([a, b, out, r, k, n] {
    a->ensure_grad();
    b->ensure_grad();
    // dA += gY * B ; dB += gY^T * A
    detail::mm_nn_acc(out->grad.data(), b->data.data(), a->grad.data(), r, n, k);
    detail::mm_tn_acc(out->grad.data(), a->data.data(), b->grad.data(), n, r, k);
  });
  return out;
}

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(*a, *b, "add");
  auto out = std::make_shared<Tensor<T>>(*a);
  out->grad.clear();
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] += b->data[i];
  tape.record([a, b, out] {
    a->ensure_grad();
    b->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->grad[i] += out->grad[i];
      b->grad[i] += out->grad[i];
    }
  });
  return out;
}

/// Elementwise product.
template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(*a, *b, "mul");
  auto out = make_tensor<T>(a->rows(), a->cols());
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  tape.record([a, b, out] {
    a->ensure_grad();
    b->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->grad[i] += out->grad[i] * b->data[i];
      b->grad[i] += out->grad[i] * a->data[i];
    }
  });
  return out;
}

/// Multiplication by a compile-time constant scalar.
template <class T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, T c) {
  auto out = make_tensor<T>(a->rows(), a->cols());
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
  tape.record([a, out, c] {
    a->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * c;
  });
  return out;
}

/// x * sigmoid(x), elementwise.
template <class T>
TensorPtr<T> silu(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(x->rows(), x->cols());
  for (std::size_t i = 0; i < out->numel(); ++i) {
    const T v = x->data[i];
    out->data[i] = v / (T{1} + std::exp(-v));
  }
  tape.record([x, out] {
    x->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i) {
      const T v = x->data[i];
      const T s = T{1} / (T{1} + std::exp(-v));
      x->grad[i] += out->grad[i] * (s + v * s * (T{1} - s));
    }
  });
  return out;
}

/// Row-wise softmax, stabilized by per-row max subtraction.
template <class T>
TensorPtr<T> softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
  const std::size_t r = x->rows(), n = x->cols();
  auto out = make_tensor<T>(r, n);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x->data.data() + i * n;
    T* orow = out->data.data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum{};
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  tape.record([x, out, r, n] {
    x->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const T* p = out->data.data() + i * n;
      const T* g = out->grad.data() + i * n;
      T dot{};
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      T* xg = x->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) xg[j] += p[j] * (g[j] - dot);
    }
  });
  return out;
}

/// Softmax over columns j <= i of each row i; exact zeros above the diagonal.
template <class T>
TensorPtr<T> causal_softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
  const std::size_t r = x->rows(), n = x->cols();
  auto out = make_tensor<T>(r, n);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t valid = std::min(i + 1, n);
    const T* row = x->data.data() + i * n;
    T* orow = out->data.data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
    T sum{};
    for (std::size_t j = 0; j < valid; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < valid; ++j) orow[j] /= sum;
  }
  tape.record([x, out, r, n] {
    x->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t valid = std::min(i + 1, n);
      const T* p = out->data.data() + i * n;
      const T* g = out->grad.data() + i * n;
      T dot{};
      for (std::size_t j = 0; j < valid; ++j) dot += p[j] * g[j];
      T* xg = x->grad.data() + i * n;
      for (std::size_t j = 0; j < valid; ++j) xg[j] += p[j] * (g[j] - dot);
    }
  });
  return out;
}

/// RMS normalization with a learned per-column gain g (shape [1 x d]).
template <class T>
TensorPtr<T> rmsnorm_rows(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& g,
                          T eps = T{1e-6}) {
  const std::size_t r = x->rows(), n = x->cols();
  if (g->numel() != n)
    throw ShapeError("rmsnorm_rows: gain " + shape_str(*g) + " does not match " +
                     shape_str(*x));
  auto out = make_tensor<T>(r, n);
  auto inv_rms = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x->data.data() + i * n;
    T ss{};
    for (std::size_t j = 0; j < n; ++j) ss += row[j] * row[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(n) + eps);
    (*inv_rms)[i] = inv;
    T* orow = out->data.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] * inv * g->data[j];
  }
  tape.record([x, g, out, inv_rms, r, n] {
    x->ensure_grad();
    g->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const T inv = (*inv_rms)[i];
      const T* row = x->data.data() + i * n;
      const T* grow = out->grad.data() + i * n;
      T dot{};  // sum_j gy_j * g_j * x_j
      for (std::size_t j = 0; j < n; ++j) {
        dot += grow[j] * g->data[j] * row[j];
        g->grad[j] += grow[j] * row[j] * inv;
      }
      T* xg = x->grad.data() + i * n;
      const T k = dot * inv * inv * inv / static_cast<T>(n);
      for (std::size_t j = 0; j < n; ++j)
        xg[j] += grow[j] * g->data[j] * inv - row[j] * k;
    }
  });
  return out;
}

/// Gathers rows of x by index; duplicate indices accumulate in the backward pass.
template <class T>
TensorPtr<T> gather_rows(Tape<T>& tape, const TensorPtr<T>& x, std::vector<int> idx) {
  const std::size_t n = x->cols();
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= x->rows())
      throw ArgumentError("gather_rows: index " + std::to_string(i) +
                          " out of range for " + shape_str(*x));
  auto out = make_tensor<T>(idx.size(), n);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x->data.data() + static_cast<std::size_t>(idx[r]) * n, n,
                out->data.data() + r * n);
  tape.record([x, out, idx = std::move(idx), n] {
    x->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      T* dst = x->grad.data() + static_cast<std::size_t>(idx[r]) * n;
      const T* src = out->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
  return out;
}

/// Places rows of x[k x d] at the given row positions of a zero [total x d] matrix.
template <class T>
TensorPtr<T> scatter_rows(Tape<T>& tape, const TensorPtr<T>& x,
                          std::vector<int> idx, std::size_t total_rows) {
  if (idx.size() != x->rows())
    throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                     shape_str(*x));
  const std::size_t n = x->cols();
  auto out = make_tensor<T>(total_rows, n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    T* dst = out->data.data() + static_cast<std::size_t>(idx[r]) * n;
    const T* src = x->data.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
  }
  tape.record([x, out, idx = std::move(idx), n] {
    x->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const T* src = out->grad.data() + static_cast<std::size_t>(idx[r]) * n;
      T* dst = x->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
  return out;
}

/// Selects a subset of columns (keeps row count).
template <class T>
TensorPtr<T> select_cols(Tape<T>& tape, const TensorPtr<T>& x, std::vector<int> cols) {
  const std::size_t r = x->rows(), n = x->cols();
  for (int c : cols)
    if (c < 0 || static_cast<std::size_t>(c) >= n)
      throw ArgumentError("select_cols: column " + std::to_string(c) +
                          " out of range for " + shape_str(*x));
  auto out = make_tensor<T>(r, cols.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out->at(i, j) = x->at(i, static_cast<std::size_t>(cols[j]));
  tape.record([x, out, cols = std::move(cols), r] {
    x->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < cols.size(); ++j)
        x->grad[i * x->cols() + static_cast<std::size_t>(cols[j])] += out->grad[i * cols.size() + j];
  });
  return out;
}

/// Concatenates tensors with equal row counts along columns.
template <class T>
TensorPtr<T> concat_cols(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: empty input");
  const std::size_t r = parts[0]->rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->rows() != r)
      throw ShapeError("concat_cols: row mismatch " + shape_str(*parts[0]) + " vs " +
                       shape_str(*p));
    total += p->cols();
  }
  auto out = make_tensor<T>(r, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p->data.data() + i * p->cols(), p->cols(),
                  out->data.data() + i * total + off);
    off += p->cols();
  }
  tape.record([parts, out, r, total] {
    std::size_t off = 0;
    for (const auto& p : parts) {
      p->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* src = out->grad.data() + i * total + off;
        T* dst = p->grad.data() + i * p->cols();
        for (std::size_t j = 0; j < p->cols(); ++j) dst[j] += src[j];
      }
      off += p->cols();
    }
  });
  return out;
}

/// Per-row sums -> [r x 1].
template <class T>
TensorPtr<T> row_sum(Tape<T>& tape, const TensorPtr<T>& x) {
  const std::size_t r = x->rows(), n = x->cols();
  auto out = make_tensor<T>(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    T acc{};
    for (std::size_t j = 0; j < n; ++j) acc += x->at(i, j);
    out->data[i] = acc;
  }
  tape.record([x, out, r, n] {
    x->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) x->grad[i * n + j] += out->grad[i];
  });
  return out;
}

/// Column means -> [1 x c].
template <class T>
TensorPtr<T> col_mean(Tape<T>& tape, const TensorPtr<T>& x) {
  const std::size_t r = x->rows(), n = x->cols();
  if (r == 0) throw ArgumentError("col_mean: empty input");
  auto out = make_tensor<T>(1, n);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out->data[j] += x->at(i, j);
  for (std::size_t j = 0; j < n; ++j) out->data[j] /= static_cast<T>(r);
  tape.record([x, out, r, n] {
    x->ensure_grad();
    const T inv = T{1} / static_cast<T>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) x->grad[i * n + j] += out->grad[j] * inv;
  });
  return out;
}

/// Full reduction -> scalar [1 x 1].
template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(1, 1);
  out->data[0] = std::accumulate(x->data.begin(), x->data.end(), T{});
  tape.record([x, out] {
    x->ensure_grad();
    for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += out->grad[0];
  });
  return out;
}

/// y_ij = x_ij * w_i with w a [r x 1] column of differentiable weights.
template <class T>
TensorPtr<T> scale_rows(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w) {
  const std::size_t r = x->rows(), n = x->cols();
  if (w->rows() != r || w->cols() != 1)
    throw ShapeError("scale_rows: weights " + shape_str(*w) + " do not match " +
                     shape_str(*x));
  auto out = make_tensor<T>(r, n);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out->at(i, j) = x->at(i, j) * w->data[i];
  tape.record([x, w, out, r, n] {
    x->ensure_grad();
    w->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      T dw{};
      for (std::size_t j = 0; j < n; ++j) {
        x->grad[i * n + j] += out->grad[i * n + j] * w->data[i];
        dw += out->grad[i * n + j] * x->data[i * n + j];
      }
      w->grad[i] += dw;
    }
  });
  return out;
}

/// y_ij = x_ij / r_i with r a [rows x 1] column; denominators are clamped away
/// from zero so forced-mask degenerate rows stay finite.
template <class T>
TensorPtr<T> div_rows(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& d,
                      T floor = T{1e-30}) {
  const std::size_t r = x->rows(), n = x->cols();
  if (d->rows() != r || d->cols() != 1)
    throw ShapeError("div_rows: denominators " + shape_str(*d) + " do not match " +
                     shape_str(*x));
  auto out = make_tensor<T>(r, n);
  auto denom = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    (*denom)[i] = std::max(d->data[i], floor);
    for (std::size_t j = 0; j < n; ++j) out->at(i, j) = x->at(i, j) / (*denom)[i];
  }
  tape.record([x, d, out, denom, r, n] {
    x->ensure_grad();
    d->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const T dv = (*denom)[i];
      T dd{};
      for (std::size_t j = 0; j < n; ++j) {
        x->grad[i * n + j] += out->grad[i * n + j] / dv;
        dd -= out->grad[i * n + j] * x->data[i * n + j] / (dv * dv);
      }
      if (d->data[i] >= dv) d->grad[i] += dd;  // no gradient through the clamp
    }
  });
  return out;
}

/// Gathers individual entries (row, col) -> [k x 1].
template <class T>
TensorPtr<T> gather_elems(Tape<T>& tape, const TensorPtr<T>& x,
                          std::vector<std::pair<int, int>> coords) {
  const std::size_t n = x->cols();
  for (auto [i, j] : coords)
    if (i < 0 || static_cast<std::size_t>(i) >= x->rows() || j < 0 ||
        static_cast<std::size_t>(j) >= n)
      throw ArgumentError("gather_elems: (" + std::to_string(i) + "," + std::to_string(j) +
                          ") out of range for " + shape_str(*x));
  auto out = make_tensor<T>(coords.size(), 1);
  for (std::size_t k = 0; k < coords.size(); ++k)
    out->data[k] = x->data[static_cast<std::size_t>(coords[k].first) * n +
                           static_cast<std::size_t>(coords[k].second)];
  tape.record([x, out, coords = std::move(coords), n] {
    x->ensure_grad();
    for (std::size_t k = 0; k < coords.size(); ++k)
      x->grad[static_cast<std::size_t>(coords[k].first) * n +
              static_cast<std::size_t>(coords[k].second)] += out->grad[k];
  });
  return out;
}

/// Sum of cross-entropies over supervised rows; targets[i] < 0 marks row i
/// unsupervised. Returns the scalar sum; divide by the supervised count for
/// the mean.
template <class T>
TensorPtr<T> cross_entropy_sum(Tape<T>& tape, const TensorPtr<T>& logits,
                               std::vector<int> targets) {
  const std::size_t r = logits->rows(), n = logits->cols();
  if (targets.size() != r)
    throw ShapeError("cross_entropy_sum: " + std::to_string(targets.size()) +
                     " targets for " + shape_str(*logits));
  for (int t : targets)
    if (t >= static_cast<int>(n))
      throw ArgumentError("cross_entropy_sum: target " + std::to_string(t) +
                          " out of range for " + shape_str(*logits));
  auto out = make_tensor<T>(1, 1);
  auto probs = std::make_shared<std::vector<T>>();  // cached for backward
  probs->resize(r * n);
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    const T* row = logits->data.data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum{};
    for (std::size_t j = 0; j < n; ++j) {
      (*probs)[i * n + j] = std::exp(row[j] - mx);
      sum += (*probs)[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) (*probs)[i * n + j] /= sum;
    out->data[0] += std::log(sum) + mx - row[static_cast<std::size_t>(targets[i])];
  }
  tape.record([logits, out, probs, targets = std::move(targets), r, n] {
    logits->ensure_grad();
    const T g = out->grad[0];
    for (std::size_t i = 0; i < r; ++i) {
      if (targets[i] < 0) continue;
      T* lg = logits->grad.data() + i * n;
      const T* p = probs->data() + i * n;
      for (std::size_t j = 0; j < n; ++j) lg[j] += g * p[j];
      lg[static_cast<std::size_t>(targets[i])] -= g;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Top-K selection (pure, not taped)
// ---------------------------------------------------------------------------

template <class T = double>
struct TopK {
  std::vector<int> indices;  // descending-value order, ties toward lowest index
  std::vector<T> values;
};

template <class T>
TopK<T> topk(std::span<const T> v, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > v.size())
    throw ArgumentError("topk: K=" + std::to_string(k) + " out of range for length " +
                        std::to_string(v.size()));
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) {
                      if (v[static_cast<std::size_t>(a)] != v[static_cast<std::size_t>(b)])
                        return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
                      return a < b;
                    });
  TopK<T> out;
  out.indices.assign(order.begin(), order.begin() + k);
  out.values.reserve(static_cast<std::size_t>(k));
  for (int i : out.indices) out.values.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

template <class T>
TopK<T> topk(const std::vector<T>& v, int k) {
  return topk(std::span<const T>(v.data(), v.size()), k);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Central finite differences vs. the tape gradient of a scalar-valued map.
/// f must be pure: it receives a fresh tape and input tensor on every call.
template <class T, class F>
GradCheckReport grad_check(F&& f, const Tensor<T>& x0, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ArgumentError("grad_check: eps " + std::to_string(eps) +
                        " outside [1e-7, 1e-3]");

  auto eval = [&](const Tensor<T>& x, Tensor<T>* grad_out) -> double {
    Tape<T> tape;
    auto xp = std::make_shared<Tensor<T>>(x);
    TensorPtr<T> y = f(tape, xp);
    if (y->numel() != 1)
      throw ShapeError("grad_check: f must be scalar-valued, got " + shape_str(*y));
    const double val = static_cast<double>(y->data[0]);
    if (!std::isfinite(val)) throw EvalError("grad_check: f produced a non-finite value");
    if (grad_out) {
      xp->zero_grad();
      tape.backward(y);
      *grad_out = *xp;
    }
    return val;
  };

  Tensor<T> base;
  eval(x0, &base);

  GradCheckReport report;
  Tensor<T> xp = x0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    const T keep = xp.data[i];
    xp.data[i] = keep + static_cast<T>(eps);
    const double fp = eval(xp, nullptr);
    xp.data[i] = keep - static_cast<T>(eps);
    const double fm = eval(xp, nullptr);
    xp.data[i] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = static_cast<double>(base.grad[i]);
    const double denom = std::max({1e-8, std::abs(numeric), std::abs(analytic)});
    const double rel = std::abs(numeric - analytic) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
      report.analytic_at_worst = analytic;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace mamoe::numkit
