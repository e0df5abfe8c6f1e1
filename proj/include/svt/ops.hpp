#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "svt/rng.hpp"
#include "svt/tensor.hpp"

namespace svt {

namespace detail {

template <class T>
void k_gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a,
            int lda, const T* b, int ldb, T beta, T* c, int ldc) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  else
    kern::ref::gemm<T>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <class T>
void k_axpby(std::size_t n, T alpha, const T* x, T beta, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().axpby(n, alpha, x, beta, y);
  else
    kern::ref::axpby(n, alpha, x, beta, y);
}

template <class T>
void k_add(std::size_t n, const T* a, const T* b, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().add(n, a, b, y);
  else
    kern::ref::add(n, a, b, y);
}

template <class T>
void k_sub(std::size_t n, const T* a, const T* b, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().sub(n, a, b, y);
  else
    kern::ref::sub(n, a, b, y);
}

template <class T>
void k_mul(std::size_t n, const T* a, const T* b, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().mul(n, a, b, y);
  else
    kern::ref::mul(n, a, b, y);
}

template <class T>
T k_dot(std::size_t n, const T* a, const T* b) {
  if constexpr (std::is_same_v<T, float>)
    return kern::active().dot(n, a, b);
  else
    return kern::ref::dot(n, a, b);
}

template <class T>
T k_sum(std::size_t n, const T* x) {
  if constexpr (std::is_same_v<T, float>)
    return kern::active().sum(n, x);
  else
    return kern::ref::sum(n, x);
}

template <class T>
void k_gelu(std::size_t n, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().gelu(n, x, y);
  else
    kern::ref::gelu(n, x, y);
}

template <class T>
void k_gelu_grad(std::size_t n, const T* x, const T* g, T* dx) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().gelu_grad(n, x, g, dx);
  else
    kern::ref::gelu_grad(n, x, g, dx);
}

template <class T>
void k_softmax_row(std::size_t n, const T* x, T inv_temp, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kern::active().softmax_row(n, x, inv_temp, y);
  else
    kern::ref::softmax_row(n, x, inv_temp, y);
}

template <class T>
bool needs(const Tensor<T>& t) {
  return t && (t->requires_grad || t->backward_fn);
}

// view a tensor as [outer, d, inner] around `axis`
inline void axis_decomp(const Shape& s, int axis, std::size_t& outer, int& d,
                        std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  d = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i)
    inner *= static_cast<std::size_t>(s[i]);
}

inline int norm_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw param_error(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// construction helpers
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> scalar_tensor(T v) {
  return make_tensor<T>({1}, std::vector<T>{v});
}

// ---------------------------------------------------------------------------
// matmul: rank-2 [m,k]x[k,n], or batched rank-3 with equal leading dim
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a->shape;
  const auto& sb = b->shape;
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) ||
        (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0])))
    throw shape_error("matmul: incompatible ranks " + shape_str(sa) + " x " +
                      shape_str(sb));
  const int bs = batched ? sa[0] : 1;
  const int m = sa[batched ? 1 : 0];
  const int ka = sa[batched ? 2 : 1];
  const int kb = sb[batched ? 1 : 0];
  const int n = sb[batched ? 2 : 1];
  if (ka != kb)
    throw shape_error("matmul: inner dimensions disagree " + shape_str(sa) +
                      " x " + shape_str(sb));
  Shape out_shape = batched ? Shape{bs, m, n} : Shape{m, n};
  auto out = make_tensor<T>(out_shape);
  const std::size_t a_stride = static_cast<std::size_t>(m) * ka;
  const std::size_t b_stride = static_cast<std::size_t>(ka) * n;
  const std::size_t o_stride = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < bs; ++i)
    detail::k_gemm<T>(false, false, m, n, ka, T(1), a->ptr() + i * a_stride,
                      ka, b->ptr() + i * b_stride, n, T(0),
                      out->ptr() + i * o_stride, n);
  TensorT<T>* op = out.get();
  record_op<T>({a, b}, out, [a, b, op, bs, m, n, ka, a_stride, b_stride,
                             o_stride]() {
    const T* g = op->grad.data();
    if (detail::needs(a)) {
      T* da = a->grad_buf().data();
      for (int i = 0; i < bs; ++i)
        detail::k_gemm<T>(false, true, m, ka, n, T(1), g + i * o_stride, n,
                          b->ptr() + i * b_stride, n, T(1), da + i * a_stride,
                          ka);
    }
    if (detail::needs(b)) {
      T* db = b->grad_buf().data();
      for (int i = 0; i < bs; ++i)
        detail::k_gemm<T>(true, false, ka, n, m, T(1), a->ptr() + i * a_stride,
                          ka, g + i * o_stride, n, T(1), db + i * b_stride, n);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear: y = x W^T + b, x [..., in], W [out, in], b [out] (optional)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w->shape.size() != 2)
    throw shape_error("linear: weight must be rank 2, got " +
                      shape_str(w->shape));
  const int in = w->shape[1];
  const int out_f = w->shape[0];
  if (x->shape.empty() || x->shape.back() != in)
    throw shape_error("linear: input " + shape_str(x->shape) +
                      " does not end in weight fan-in " +
                      shape_str(w->shape));
  if (b && !(b->shape.size() == 1 && b->shape[0] == out_f))
    throw shape_error("linear: bias " + shape_str(b->shape) +
                      " does not match fan-out " + std::to_string(out_f));
  const int rows = static_cast<int>(x->size()) / in;
  Shape out_shape = x->shape;
  out_shape.back() = out_f;
  auto y = make_tensor<T>(std::move(out_shape));
  detail::k_gemm<T>(false, true, rows, out_f, in, T(1), x->ptr(), in, w->ptr(),
                    in, T(0), y->ptr(), out_f);
  if (b) {
    T* yp = y->ptr();
    const T* bp = b->ptr();
    for (int r = 0; r < rows; ++r)
      detail::k_axpby<T>(out_f, T(1), bp, T(1), yp + static_cast<std::size_t>(r) * out_f);
  }
  TensorT<T>* op = y.get();
  record_op<T>({x, w, b}, y, [x, w, b, op, rows, in, out_f]() {
    const T* g = op->grad.data();
    if (detail::needs(x))
      detail::k_gemm<T>(false, false, rows, in, out_f, T(1), g, out_f,
                        w->ptr(), in, T(1), x->grad_buf().data(), in);
    if (detail::needs(w))
      detail::k_gemm<T>(true, false, out_f, in, rows, T(1), g, out_f, x->ptr(),
                        in, T(1), w->grad_buf().data(), in);
    if (b && detail::needs(b)) {
      T* db = b->grad_buf().data();
      for (int r = 0; r < rows; ++r)
        detail::k_axpby<T>(out_f, T(1), g + static_cast<std::size_t>(r) * out_f, T(1), db);
    }
  });
  return y;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, Tensor<T>{});
}

// ---------------------------------------------------------------------------
// softmax over an axis with temperature (sharpening = divide by tau)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis, T temperature) {
  if (!(temperature > T(0)))
    throw param_error("softmax: temperature must be positive, got " +
                      std::to_string(temperature));
  const int ax = detail::norm_axis(axis, static_cast<int>(x->shape.size()),
                                   "softmax");
  std::size_t outer, inner;
  int d;
  detail::axis_decomp(x->shape, ax, outer, d, inner);
  auto y = make_tensor<T>(x->shape);
  const T inv_t = T(1) / temperature;
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o)
      detail::k_softmax_row<T>(d, x->ptr() + o * d, inv_t, y->ptr() + o * d);
  } else {
    std::vector<T> row(d), srow(d);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const T* xp = x->ptr() + (o * d) * inner + i;
        for (int j = 0; j < d; ++j) row[j] = xp[j * inner];
        detail::k_softmax_row<T>(d, row.data(), inv_t, srow.data());
        T* yp = y->ptr() + (o * d) * inner + i;
        for (int j = 0; j < d; ++j) yp[j * inner] = srow[j];
      }
  }
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, outer, d, inner, inv_t]() {
    if (!detail::needs(x)) return;
    const T* g = op->grad.data();
    const T* yv = op->data.data();
    T* dx = x->grad_buf().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = (o * d) * inner + i;
        T dot = T(0);
        for (int j = 0; j < d; ++j)
          dot += g[base + j * inner] * yv[base + j * inner];
        for (int j = 0; j < d; ++j) {
          const std::size_t k = base + j * inner;
          dx[k] += (g[k] - dot) * yv[k] * inv_t;
        }
      }
  });
  return y;
}

// log softmax over the last axis; probs = exp(result)
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, T temperature) {
  if (!(temperature > T(0)))
    throw param_error("log_softmax: temperature must be positive");
  if (x->shape.empty()) throw shape_error("log_softmax: rank-0 input");
  const int d = x->shape.back();
  const std::size_t rows = x->size() / d;
  auto y = make_tensor<T>(x->shape);
  auto probs = std::make_shared<std::vector<T>>(x->size());
  const T inv_t = T(1) / temperature;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x->ptr() + r * d;
    T* yp = y->ptr() + r * d;
    T* pp = probs->data() + r * d;
    detail::k_softmax_row<T>(d, xp, inv_t, pp);
    // log via the stable shifted form rather than log(probs)
    T m = xp[0];
    for (int j = 1; j < d; ++j) m = xp[j] > m ? xp[j] : m;
    T s = T(0);
    for (int j = 0; j < d; ++j) {
      yp[j] = (xp[j] - m) * inv_t;
      s += std::exp(yp[j]);
    }
    const T lz = std::log(s);
    for (int j = 0; j < d; ++j) yp[j] -= lz;
  }
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, probs, rows, d, inv_t]() {
    if (!detail::needs(x)) return;
    const T* g = op->grad.data();
    T* dx = x->grad_buf().data();
    const T* pp = probs->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * d;
      const T gs = detail::k_sum<T>(d, g + base);
      for (int j = 0; j < d; ++j)
        dx[base + j] += (g[base + j] - pp[base + j] * gs) * inv_t;
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis, eps inside the sqrt
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-6)) {
  if (!(eps > T(0))) throw param_error("layer_norm: eps must be positive");
  if (x->shape.empty()) throw shape_error("layer_norm: rank-0 input");
  const int d = x->shape.back();
  if (!(gain->shape == Shape{d}) || !(bias->shape == Shape{d}))
    throw shape_error("layer_norm: gain/bias must be [" + std::to_string(d) +
                      "], got " + shape_str(gain->shape) + " and " +
                      shape_str(bias->shape));
  const std::size_t rows = x->size() / d;
  auto y = make_tensor<T>(x->shape);
  auto xhat = std::make_shared<std::vector<T>>(x->size());
  auto inv_sd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x->ptr() + r * d;
    const T mu = detail::k_sum<T>(d, xp) / T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      const T c = xp[j] - mu;
      var += c * c;
    }
    var /= T(d);
    const T s = T(1) / std::sqrt(var + eps);
    (*inv_sd)[r] = s;
    T* hp = xhat->data() + r * d;
    T* yp = y->ptr() + r * d;
    const T* gp = gain->ptr();
    const T* bp = bias->ptr();
    for (int j = 0; j < d; ++j) {
      hp[j] = (xp[j] - mu) * s;
      yp[j] = hp[j] * gp[j] + bp[j];
    }
  }
  TensorT<T>* op = y.get();
  record_op<T>({x, gain, bias}, y, [x, gain, bias, op, xhat, inv_sd, rows,
                                    d]() {
    const T* g = op->grad.data();
    const T* hp = xhat->data();
    const T* gp = gain->ptr();
    if (detail::needs(gain) || detail::needs(bias)) {
      T* dg = detail::needs(gain) ? gain->grad_buf().data() : nullptr;
      T* db = detail::needs(bias) ? bias->grad_buf().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) {
          const std::size_t k = r * d + j;
          if (dg) dg[j] += g[k] * hp[k];
          if (db) db[j] += g[k];
        }
    }
    if (detail::needs(x)) {
      T* dx = x->grad_buf().data();
      std::vector<T> dh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        T m1 = T(0), m2 = T(0);
        for (int j = 0; j < d; ++j) {
          dh[j] = g[base + j] * gp[j];
          m1 += dh[j];
          m2 += dh[j] * hp[base + j];
        }
        m1 /= T(d);
        m2 /= T(d);
        const T s = (*inv_sd)[r];
        for (int j = 0; j < d; ++j)
          dx[base + j] += s * (dh[j] - m1 - hp[base + j] * m2);
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto y = make_tensor<T>(x->shape);
  detail::k_gelu<T>(x->size(), x->ptr(), y->ptr());
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op]() {
    if (detail::needs(x))
      detail::k_gelu_grad<T>(x->size(), x->ptr(), op->grad.data(),
                             x->grad_buf().data());
  });
  return y;
}

namespace detail {
template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op_name) {
  if (a->shape != b->shape)
    throw shape_error(std::string(op_name) + ": shapes differ " +
                      shape_str(a->shape) + " vs " + shape_str(b->shape));
}
}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto y = make_tensor<T>(a->shape);
  detail::k_add<T>(a->size(), a->ptr(), b->ptr(), y->ptr());
  TensorT<T>* op = y.get();
  record_op<T>({a, b}, y, [a, b, op]() {
    if (detail::needs(a))
      detail::k_axpby<T>(a->size(), T(1), op->grad.data(), T(1),
                         a->grad_buf().data());
    if (detail::needs(b))
      detail::k_axpby<T>(b->size(), T(1), op->grad.data(), T(1),
                         b->grad_buf().data());
  });
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto y = make_tensor<T>(a->shape);
  detail::k_sub<T>(a->size(), a->ptr(), b->ptr(), y->ptr());
  TensorT<T>* op = y.get();
  record_op<T>({a, b}, y, [a, b, op]() {
    if (detail::needs(a))
      detail::k_axpby<T>(a->size(), T(1), op->grad.data(), T(1),
                         a->grad_buf().data());
    if (detail::needs(b))
      detail::k_axpby<T>(b->size(), T(-1), op->grad.data(), T(1),
                         b->grad_buf().data());
  });
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto y = make_tensor<T>(a->shape);
  detail::k_mul<T>(a->size(), a->ptr(), b->ptr(), y->ptr());
  TensorT<T>* op = y.get();
  record_op<T>({a, b}, y, [a, b, op]() {
    const std::size_t n = op->data.size();
    if (detail::needs(a)) {
      T* da = a->grad_buf().data();
      const T* g = op->grad.data();
      const T* bp = b->ptr();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bp[i];
    }
    if (detail::needs(b)) {
      T* db = b->grad_buf().data();
      const T* g = op->grad.data();
      const T* ap = a->ptr();
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * ap[i];
    }
  });
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  auto y = make_tensor<T>(x->shape);
  detail::k_axpby<T>(x->size(), c, x->ptr(), T(0), y->ptr());
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, c]() {
    if (detail::needs(x))
      detail::k_axpby<T>(x->size(), c, op->grad.data(), T(1),
                         x->grad_buf().data());
  });
  return y;
}

// x viewed as [R, C] plus v [C] broadcast over rows
template <class T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& v) {
  if (v->shape.size() != 1 || x->size() % v->size() != 0)
    throw shape_error("add_rows: " + shape_str(x->shape) + " + " +
                      shape_str(v->shape));
  const std::size_t c = v->size();
  const std::size_t rows = x->size() / c;
  auto y = make_tensor<T>(x->shape);
  for (std::size_t r = 0; r < rows; ++r)
    detail::k_add<T>(c, x->ptr() + r * c, v->ptr(), y->ptr() + r * c);
  TensorT<T>* op = y.get();
  record_op<T>({x, v}, y, [x, v, op, rows, c]() {
    if (detail::needs(x))
      detail::k_axpby<T>(x->size(), T(1), op->grad.data(), T(1),
                         x->grad_buf().data());
    if (detail::needs(v)) {
      T* dv = v->grad_buf().data();
      for (std::size_t r = 0; r < rows; ++r)
        detail::k_axpby<T>(c, T(1), op->grad.data() + r * c, T(1), dv);
    }
  });
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x->size())
    throw shape_error("reshape: cannot view " + shape_str(x->shape) + " as " +
                      shape_str(new_shape));
  auto y = make_tensor<T>(std::move(new_shape), x->data);
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op]() {
    if (detail::needs(x))
      detail::k_axpby<T>(x->size(), T(1), op->grad.data(), T(1),
                         x->grad_buf().data());
  });
  return y;
}

// general permutation, rank <= 6
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int rank = static_cast<int>(x->shape.size());
  if (static_cast<int>(perm.size()) != rank)
    throw param_error("permute: perm rank mismatch");
  std::vector<char> seen(rank, 0);
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) {
    if (perm[i] < 0 || perm[i] >= rank || seen[perm[i]])
      throw param_error("permute: invalid permutation");
    seen[perm[i]] = 1;
    out_shape[i] = x->shape[perm[i]];
  }
  std::vector<std::size_t> in_strides(rank, 1), map(rank);
  for (int i = rank - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * x->shape[i + 1];
  for (int i = 0; i < rank; ++i) map[i] = in_strides[perm[i]];
  auto y = make_tensor<T>(out_shape);
  const std::size_t n = x->size();
  std::vector<int> idx(rank, 0);
  const T* xp = x->ptr();
  T* yp = y->ptr();
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (int i = 0; i < rank; ++i) src += idx[i] * map[i];
    yp[o] = xp[src];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, out_shape, map, rank, n]() {
    if (!detail::needs(x)) return;
    T* dx = x->grad_buf().data();
    const T* g = op->grad.data();
    std::vector<int> idx(rank, 0);
    for (std::size_t o = 0; o < n; ++o) {
      std::size_t src = 0;
      for (int i = 0; i < rank; ++i) src += idx[i] * map[i];
      dx[src] += g[o];
      for (int i = rank - 1; i >= 0; --i) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  });
  return y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x->shape.size() != 2)
    throw shape_error("transpose: expects rank 2, got " +
                      shape_str(x->shape));
  return permute(x, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw param_error("concat: no inputs");
  const int rank = static_cast<int>(parts[0]->shape.size());
  const int ax = detail::norm_axis(axis, rank, "concat");
  Shape out_shape = parts[0]->shape;
  int total_d = 0;
  for (const auto& p : parts) {
    if (static_cast<int>(p->shape.size()) != rank)
      throw shape_error("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != ax && p->shape[i] != out_shape[i])
        throw shape_error("concat: shapes differ off-axis: " +
                          shape_str(out_shape) + " vs " + shape_str(p->shape));
    total_d += p->shape[ax];
  }
  out_shape[ax] = total_d;
  auto y = make_tensor<T>(out_shape);
  std::size_t outer, inner;
  int d_out;
  detail::axis_decomp(out_shape, ax, outer, d_out, inner);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pd = p->shape[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(y->ptr() + (o * d_out) * inner + off, p->ptr() + o * pd,
                  pd * sizeof(T));
    off += pd;
  }
  TensorT<T>* op = y.get();
  record_op<T>(parts, y, [parts, op, outer, d_out, inner]() {
    const T* g = op->grad.data();
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t pd = p->size() / outer;
      if (detail::needs(p)) {
        T* dp = p->grad_buf().data();
        for (std::size_t o = 0; o < outer; ++o)
          detail::k_axpby<T>(pd, T(1), g + (o * d_out) * inner + off, T(1),
                             dp + o * pd);
      }
      off += pd;
    }
  });
  return y;
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
  const int rank = static_cast<int>(x->shape.size());
  const int ax = detail::norm_axis(axis, rank, "slice");
  if (start < 0 || len <= 0 || start + len > x->shape[ax])
    throw param_error("slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of bounds for " +
                      shape_str(x->shape));
  Shape out_shape = x->shape;
  out_shape[ax] = len;
  auto y = make_tensor<T>(out_shape);
  std::size_t outer, inner;
  int d;
  detail::axis_decomp(x->shape, ax, outer, d, inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(y->ptr() + o * len * inner,
                x->ptr() + (o * d + start) * inner, len * inner * sizeof(T));
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, outer, d, inner, start, len]() {
    if (!detail::needs(x)) return;
    T* dx = x->grad_buf().data();
    const T* g = op->grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      detail::k_axpby<T>(len * inner, T(1), g + o * len * inner, T(1),
                         dx + (o * d + start) * inner);
  });
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  auto y = scalar_tensor<T>(detail::k_sum<T>(x->size(), x->ptr()) /
                            T(x->size()));
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op]() {
    if (!detail::needs(x)) return;
    T* dx = x->grad_buf().data();
    const T gn = op->grad[0] / T(x->size());
    for (std::size_t i = 0; i < x->size(); ++i) dx[i] += gn;
  });
  return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto y = scalar_tensor<T>(detail::k_sum<T>(x->size(), x->ptr()));
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op]() {
    if (detail::needs(x)) {
      T* dx = x->grad_buf().data();
      const T g = op->grad[0];
      for (std::size_t i = 0; i < x->size(); ++i) dx[i] += g;
    }
  });
  return y;
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw param_error("dropout: p must lie in [0, 1), got " +
                      std::to_string(p));
  if (!training || p == 0.0) return x;
  auto y = make_tensor<T>(x->shape);
  auto mask = std::make_shared<std::vector<T>>(x->size());
  const T keep_scale = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x->size(); ++i) {
    const T m = rng.bernoulli(1.0 - p) ? keep_scale : T(0);
    (*mask)[i] = m;
    y->data[i] = x->data[i] * m;
  }
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, mask]() {
    if (!detail::needs(x)) return;
    T* dx = x->grad_buf().data();
    const T* g = op->grad.data();
    const T* m = mask->data();
    for (std::size_t i = 0; i < x->size(); ++i) dx[i] += g[i] * m[i];
  });
  return y;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// mean over batch of -sum_k target[k] * log softmax(logits)[k]
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits->shape.size() != 2 || targets->shape != logits->shape)
    throw shape_error("cross_entropy: want matching [B,k], got " +
                      shape_str(logits->shape) + " and " +
                      shape_str(targets->shape));
  const int bsz = logits->shape[0];
  const int k = logits->shape[1];
  for (int r = 0; r < bsz; ++r) {
    const T s = detail::k_sum<T>(k, targets->ptr() + static_cast<std::size_t>(r) * k);
    if (std::abs(s - T(1)) > T(1e-5))
      throw validation_error("cross_entropy: target row " + std::to_string(r) +
                             " sums to " + std::to_string(double(s)) +
                             ", expected 1");
  }
  auto probs = std::make_shared<std::vector<T>>(logits->size());
  T loss = T(0);
  std::vector<T> lsm(k);
  for (int r = 0; r < bsz; ++r) {
    const T* xp = logits->ptr() + static_cast<std::size_t>(r) * k;
    const T* tp = targets->ptr() + static_cast<std::size_t>(r) * k;
    T m = xp[0];
    for (int j = 1; j < k; ++j) m = xp[j] > m ? xp[j] : m;
    T s = T(0);
    for (int j = 0; j < k; ++j) {
      lsm[j] = xp[j] - m;
      s += std::exp(lsm[j]);
    }
    const T lz = std::log(s);
    T* pp = probs->data() + static_cast<std::size_t>(r) * k;
    for (int j = 0; j < k; ++j) {
      pp[j] = std::exp(lsm[j]) / s;
      loss -= tp[j] * (lsm[j] - lz);
    }
  }
  auto y = scalar_tensor<T>(loss / T(bsz));
  TensorT<T>* op = y.get();
  record_op<T>({logits, targets}, y, [logits, targets, op, probs, bsz, k]() {
    if (!detail::needs(logits)) return;
    const T g = op->grad[0] / T(bsz);
    T* dx = logits->grad_buf().data();
    const T* pp = probs->data();
    const T* tp = targets->ptr();
    const std::size_t n = logits->size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g * (pp[i] - tp[i]);
  });
  return y;
}

// mean over rows of -sum_k targets[k] * log_probs[k]; gradient flows to
// log_probs only (targets are detached teacher outputs)
template <class T>
Tensor<T> soft_cross_entropy_logprobs(const Tensor<T>& targets,
                                      const Tensor<T>& log_probs) {
  detail::check_same_shape(targets, log_probs, "soft_cross_entropy_logprobs");
  if (log_probs->shape.size() != 2)
    throw shape_error("soft_cross_entropy_logprobs: want rank 2");
  const int bsz = log_probs->shape[0];
  const T loss = -detail::k_dot<T>(log_probs->size(), targets->ptr(),
                                   log_probs->ptr());
  auto y = scalar_tensor<T>(loss / T(bsz));
  TensorT<T>* op = y.get();
  record_op<T>({log_probs}, y, [targets, log_probs, op, bsz]() {
    if (!detail::needs(log_probs)) return;
    detail::k_axpby<T>(log_probs->size(), -op->grad[0] / T(bsz),
                       targets->ptr(), T(1), log_probs->grad_buf().data());
  });
  return y;
}

// ---------------------------------------------------------------------------
// l2 normalize rows (projection-head bottleneck)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x->shape.empty()) throw shape_error("l2_normalize: rank-0 input");
  const int d = x->shape.back();
  const std::size_t rows = x->size() / d;
  auto y = make_tensor<T>(x->shape);
  auto inv_norm = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x->ptr() + r * d;
    const T n2 = detail::k_dot<T>(d, xp, xp);
    const T inv = T(1) / std::sqrt(n2 > eps ? n2 : eps);
    (*inv_norm)[r] = inv;
    detail::k_axpby<T>(d, inv, xp, T(0), y->ptr() + r * d);
  }
  TensorT<T>* op = y.get();
  record_op<T>({x}, y, [x, op, inv_norm, rows, d]() {
    if (!detail::needs(x)) return;
    T* dx = x->grad_buf().data();
    const T* g = op->grad.data();
    const T* yv = op->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * d;
      const T dot = detail::k_dot<T>(d, g + base, yv + base);
      const T inv = (*inv_norm)[r];
      for (int j = 0; j < d; ++j)
        dx[base + j] += (g[base + j] - yv[base + j] * dot) * inv;
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// token helpers
// ---------------------------------------------------------------------------

// x [B,N,D] + cls [D] -> [B,N+1,D] with cls prepended to every sample
template <class T>
Tensor<T> prepend_cls(const Tensor<T>& x, const Tensor<T>& cls) {
  if (x->shape.size() != 3 || cls->shape.size() != 1 ||
      cls->shape[0] != x->shape[2])
    throw shape_error("prepend_cls: got " + shape_str(x->shape) + " and " +
                      shape_str(cls->shape));
  const int bsz = x->shape[0], n = x->shape[1], d = x->shape[2];
  auto y = make_tensor<T>({bsz, n + 1, d});
  for (int b = 0; b < bsz; ++b) {
    T* yp = y->ptr() + static_cast<std::size_t>(b) * (n + 1) * d;
    std::memcpy(yp, cls->ptr(), d * sizeof(T));
    std::memcpy(yp + d, x->ptr() + static_cast<std::size_t>(b) * n * d,
                static_cast<std::size_t>(n) * d * sizeof(T));
  }
  TensorT<T>* op = y.get();
  record_op<T>({x, cls}, y, [x, cls, op, bsz, n, d]() {
    const T* g = op->grad.data();
    if (detail::needs(cls)) {
      T* dc = cls->grad_buf().data();
      for (int b = 0; b < bsz; ++b)
        detail::k_axpby<T>(d, T(1),
                           g + static_cast<std::size_t>(b) * (n + 1) * d, T(1),
                           dc);
    }
    if (detail::needs(x)) {
      T* dx = x->grad_buf().data();
      for (int b = 0; b < bsz; ++b)
        detail::k_axpby<T>(static_cast<std::size_t>(n) * d, T(1),
                           g + static_cast<std::size_t>(b) * (n + 1) * d + d,
                           T(1), dx + static_cast<std::size_t>(b) * n * d);
    }
  });
  return y;
}

// x [B,N,D] + pos [N,D] broadcast over batch
template <class T>
Tensor<T> add_pos(const Tensor<T>& x, const Tensor<T>& pos) {
  if (x->shape.size() != 3 || pos->shape.size() != 2 ||
      pos->shape[0] != x->shape[1] || pos->shape[1] != x->shape[2])
    throw shape_error("add_pos: got " + shape_str(x->shape) + " and " +
                      shape_str(pos->shape));
  const int bsz = x->shape[0];
  const std::size_t m = pos->size();
  auto y = make_tensor<T>(x->shape);
  for (int b = 0; b < bsz; ++b)
    detail::k_add<T>(m, x->ptr() + b * m, pos->ptr(), y->ptr() + b * m);
  TensorT<T>* op = y.get();
  record_op<T>({x, pos}, y, [x, pos, op, bsz, m]() {
    const T* g = op->grad.data();
    if (detail::needs(x))
      detail::k_axpby<T>(x->size(), T(1), g, T(1), x->grad_buf().data());
    if (detail::needs(pos)) {
      T* dp = pos->grad_buf().data();
      for (int b = 0; b < bsz; ++b)
        detail::k_axpby<T>(m, T(1), g + b * m, T(1), dp);
    }
  });
  return y;
}

// x [B,N,D] -> [B,D], token 0
template <class T>
Tensor<T> take_cls(const Tensor<T>& x) {
  if (x->shape.size() != 3)
    throw shape_error("take_cls: want [B,N,D], got " + shape_str(x->shape));
  auto y = slice(x, 1, 0, 1);
  return reshape(y, {x->shape[0], x->shape[2]});
}

// ---------------------------------------------------------------------------
// fused multi-head self-attention core
// qkv [B,N,3D] (rows laid out [q|k|v]); returns context [B,N,D].
// If attn_out != nullptr it receives the post-softmax maps [B,H,N,N]
// (detached copy).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> mha(const Tensor<T>& qkv, int heads, Tensor<T>* attn_out = nullptr) {
  if (qkv->shape.size() != 3 || qkv->shape[2] % 3 != 0)
    throw shape_error("mha: want qkv [B,N,3D], got " + shape_str(qkv->shape));
  const int bsz = qkv->shape[0], n = qkv->shape[1];
  const int dm = qkv->shape[2] / 3;
  if (heads <= 0 || dm % heads != 0)
    throw param_error("mha: model dim " + std::to_string(dm) +
                      " not divisible by heads " + std::to_string(heads));
  const int dh = dm / heads;
  const T alpha = T(1) / std::sqrt(T(dh));
  const int ld = 3 * dm;
  auto ctx = make_tensor<T>({bsz, n, dm});
  const bool rec =
      Tape<T>::instance().recording && detail::needs(qkv);
  const std::size_t pmat = static_cast<std::size_t>(n) * n;
  auto probs = std::make_shared<std::vector<T>>(
      (rec || attn_out) ? static_cast<std::size_t>(bsz) * heads * pmat : 0);
  std::vector<T> scores(pmat);
  std::vector<T> local_p(rec || attn_out ? 0 : pmat);
  for (int b = 0; b < bsz; ++b) {
    const T* base = qkv->ptr() + static_cast<std::size_t>(b) * n * ld;
    for (int h = 0; h < heads; ++h) {
      const T* q = base + h * dh;
      const T* k = base + dm + h * dh;
      const T* v = base + 2 * dm + h * dh;
      detail::k_gemm<T>(false, true, n, n, dh, alpha, q, ld, k, ld, T(0),
                        scores.data(), n);
      T* p = (rec || attn_out)
                 ? probs->data() + (static_cast<std::size_t>(b) * heads + h) * pmat
                 : local_p.data();
      for (int r = 0; r < n; ++r)
        detail::k_softmax_row<T>(n, scores.data() + static_cast<std::size_t>(r) * n, T(1),
                                 p + static_cast<std::size_t>(r) * n);
      detail::k_gemm<T>(false, false, n, dh, n, T(1), p, n, v, ld, T(0),
                        ctx->ptr() + static_cast<std::size_t>(b) * n * dm + h * dh, dm);
    }
  }
  if (attn_out) {
    *attn_out = make_tensor<T>({bsz, heads, n, n},
                               std::vector<T>(probs->begin(), probs->end()));
  }
  TensorT<T>* op = ctx.get();
  record_op<T>({qkv}, ctx, [qkv, op, probs, bsz, n, dm, heads, dh, alpha,
                            ld]() {
    if (!detail::needs(qkv)) return;
    const std::size_t pmat = static_cast<std::size_t>(n) * n;
    T* dqkv = qkv->grad_buf().data();
    const T* g = op->grad.data();
    std::vector<T> dp(pmat), ds(pmat);
    for (int b = 0; b < bsz; ++b) {
      const T* base = qkv->ptr() + static_cast<std::size_t>(b) * n * ld;
      T* dbase = dqkv + static_cast<std::size_t>(b) * n * ld;
      const T* gctx = g + static_cast<std::size_t>(b) * n * dm;
      for (int h = 0; h < heads; ++h) {
        const T* q = base + h * dh;
        const T* k = base + dm + h * dh;
        const T* v = base + 2 * dm + h * dh;
        T* dq = dbase + h * dh;
        T* dk = dbase + dm + h * dh;
        T* dv = dbase + 2 * dm + h * dh;
        const T* p = probs->data() + (static_cast<std::size_t>(b) * heads + h) * pmat;
        const T* gh = gctx + h * dh;
        // dV += P^T * G
        detail::k_gemm<T>(true, false, n, dh, n, T(1), p, n, gh, dm, T(1), dv,
                          ld);
        // dP = G * V^T
        detail::k_gemm<T>(false, true, n, n, dh, T(1), gh, dm, v, ld, T(0),
                          dp.data(), n);
        // dS = P o (dP - rowsum(dP o P))
        for (int r = 0; r < n; ++r) {
          const std::size_t row = static_cast<std::size_t>(r) * n;
          const T dot = detail::k_dot<T>(n, dp.data() + row, p + row);
          for (int j = 0; j < n; ++j)
            ds[row + j] = p[row + j] * (dp[row + j] - dot);
        }
        // dQ += alpha * dS * K ; dK += alpha * dS^T * Q
        detail::k_gemm<T>(false, false, n, dh, n, alpha, ds.data(), n, k, ld,
                          T(1), dq, ld);
        detail::k_gemm<T>(true, false, n, dh, n, alpha, ds.data(), n, q, ld,
                          T(1), dk, ld);
      }
    }
  });
  return ctx;
}

// ---------------------------------------------------------------------------
// position-embedding interpolation (bilinear, align-corners) for inputs whose
// patch grid differs from the native one; row 0 (CLS slot) passes through.
// pos [1 + g*g, D] -> [1 + go*go, D]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> interp_pos(const Tensor<T>& pos, int g, int go) {
  if (pos->shape.size() != 2 || pos->shape[0] != g * g + 1)
    throw shape_error("interp_pos: pos " + shape_str(pos->shape) +
                      " does not match grid " + std::to_string(g));
  const int d = pos->shape[1];
  if (go == g) {
    // same grid: exact identity (bit-equal), still differentiable
    auto y = make_tensor<T>(pos->shape, pos->data);
    TensorT<T>* op = y.get();
    record_op<T>({pos}, y, [pos, op]() {
      if (detail::needs(pos))
        detail::k_axpby<T>(pos->size(), T(1), op->grad.data(), T(1),
                           pos->grad_buf().data());
    });
    return y;
  }
  auto y = make_tensor<T>({go * go + 1, d});
  std::memcpy(y->ptr(), pos->ptr(), d * sizeof(T));
  // each output grid point pulls from up to 4 source points
  struct Tap {
    int src;
    T w;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(
      static_cast<std::size_t>(go) * go);
  const T sc = go > 1 ? T(g - 1) / T(go - 1) : T(0);
  for (int oy = 0; oy < go; ++oy) {
    const T fy = oy * sc;
    int y0 = static_cast<int>(std::floor(fy));
    if (y0 > g - 2) y0 = g - 2;
    if (y0 < 0) y0 = 0;
    const T wy = g > 1 ? fy - y0 : T(0);
    for (int ox = 0; ox < go; ++ox) {
      const T fx = ox * sc;
      int x0 = static_cast<int>(std::floor(fx));
      if (x0 > g - 2) x0 = g - 2;
      if (x0 < 0) x0 = 0;
      const T wx = g > 1 ? fx - x0 : T(0);
      auto& tp = (*taps)[static_cast<std::size_t>(oy) * go + ox];
      const int x1 = g > 1 ? x0 + 1 : x0;
      const int y1 = g > 1 ? y0 + 1 : y0;
      tp[0] = {y0 * g + x0, (T(1) - wy) * (T(1) - wx)};
      tp[1] = {y0 * g + x1, (T(1) - wy) * wx};
      tp[2] = {y1 * g + x0, wy * (T(1) - wx)};
      tp[3] = {y1 * g + x1, wy * wx};
      T* dst = y->ptr() + (static_cast<std::size_t>(oy) * go + ox + 1) * d;
      for (int j = 0; j < d; ++j) dst[j] = T(0);
      for (const auto& t : tp) {
        if (t.w == T(0)) continue;
        detail::k_axpby<T>(d, t.w, pos->ptr() + static_cast<std::size_t>(t.src + 1) * d,
                           T(1), dst);
      }
    }
  }
  TensorT<T>* op = y.get();
  record_op<T>({pos}, y, [pos, op, taps, go, d]() {
    if (!detail::needs(pos)) return;
    T* dp = pos->grad_buf().data();
    const T* g2 = op->grad.data();
    detail::k_axpby<T>(d, T(1), g2, T(1), dp);  // CLS row
    const std::size_t cells = static_cast<std::size_t>(go) * go;
    for (std::size_t c = 0; c < cells; ++c) {
      const T* src = g2 + (c + 1) * d;
      for (const auto& t : (*taps)[c]) {
        if (t.w == T(0)) continue;
        detail::k_axpby<T>(d, t.w, src, T(1), dp + static_cast<std::size_t>(t.src + 1) * d);
      }
    }
  });
  return y;
}

}  // namespace svt
