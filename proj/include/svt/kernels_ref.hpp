#pragma once

#include <cmath>
#include <cstddef>

// Reference kernels, templated on the scalar type. The float instantiation
// backs the `scalar` dispatch lane; the double instantiation backs the f64
// testing dtype directly (no SIMD lane for f64).

namespace svt::kern::ref {

template <class T>
void gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (alpha == T(0) || k == 0) return;
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const T aip = ta ? a[static_cast<std::size_t>(p) * lda + i]
                       : a[static_cast<std::size_t>(i) * lda + p];
      if (aip == T(0)) continue;
      const T s = alpha * aip;
      const T* brow = tb ? nullptr : b + static_cast<std::size_t>(p) * ldb;
      if (!tb) {
        for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
      } else {
        for (int j = 0; j < n; ++j)
          crow[j] += s * b[static_cast<std::size_t>(j) * ldb + p];
      }
    }
  }
}

template <class T>
void add(std::size_t n, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <class T>
void sub(std::size_t n, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

template <class T>
void mul(std::size_t n, const T* a, const T* b, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

template <class T>
void axpby(std::size_t n, T alpha, const T* x, T beta, T* y) {
  if (beta == T(0)) {
    for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
  }
}

template <class T>
T dot(std::size_t n, const T* a, const T* b) {
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T sum(std::size_t n, const T* x) {
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

template <class T>
T max(std::size_t n, const T* x) {
  T m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

template <class T>
bool all_finite(std::size_t n, const T* x) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

template <class T>
void vexp(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

// tanh-form gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;

template <class T>
void gelu(std::size_t n, const T* x, T* y) {
  const T c0 = T(kGeluC0), c1 = T(kGeluC1);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(c0 * (v + c1 * v * v * v));
    y[i] = T(0.5) * v * (T(1) + t);
  }
}

template <class T>
void gelu_grad(std::size_t n, const T* x, const T* g, T* dx) {
  const T c0 = T(kGeluC0), c1 = T(kGeluC1);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(c0 * (v + c1 * v * v * v));
    const T du = c0 * (T(1) + T(3) * c1 * v * v);
    const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
    dx[i] += g[i] * d;
  }
}

template <class T>
void softmax_row(std::size_t n, const T* x, T inv_temp, T* y) {
  const T m = max(n, x);
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp((x[i] - m) * inv_temp);
    s += y[i];
  }
  const T inv = T(1) / s;
  for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

template <class T>
void adam(std::size_t n, T* p, const T* g, T* m, T* v, T lr, T beta1, T beta2,
          T eps, T wd, T bc1, T bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] * bc1;
    const T vhat = v[i] * bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace svt::kern::ref
