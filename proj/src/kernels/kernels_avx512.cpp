// AVX512 lane (F+VL+BW+DQ). Compiled with -mavx512f -mavx512vl -mavx512bw
// -mavx512dq -mfma; only entered when the CPU reports all four.

#include <immintrin.h>

#include <cfloat>
#include <cmath>
#include <cstddef>

#include "svt/kernels.hpp"

namespace svt::kern {
namespace {

inline __m512 exp512(__m512 x) {
  x = _mm512_min_ps(x, _mm512_set1_ps(88.3762626647950f));
  x = _mm512_max_ps(x, _mm512_set1_ps(-87.3365447504019f));
  __m512 fx = _mm512_mul_ps(x, _mm512_set1_ps(1.44269504088896341f));
  fx = _mm512_roundscale_ps(fx, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  x = _mm512_fnmadd_ps(fx, _mm512_set1_ps(0.693359375f), x);
  x = _mm512_fnmadd_ps(fx, _mm512_set1_ps(-2.12194440e-4f), x);
  const __m512 z = _mm512_mul_ps(x, x);
  __m512 p = _mm512_set1_ps(1.9875691500e-4f);
  p = _mm512_fmadd_ps(p, x, _mm512_set1_ps(1.3981999507e-3f));
  p = _mm512_fmadd_ps(p, x, _mm512_set1_ps(8.3334519073e-3f));
  p = _mm512_fmadd_ps(p, x, _mm512_set1_ps(4.1665795894e-2f));
  p = _mm512_fmadd_ps(p, x, _mm512_set1_ps(1.6666665459e-1f));
  p = _mm512_fmadd_ps(p, x, _mm512_set1_ps(5.0000001201e-1f));
  p = _mm512_fmadd_ps(p, z, x);
  p = _mm512_add_ps(p, _mm512_set1_ps(1.0f));
  __m512i e = _mm512_cvtps_epi32(fx);
  e = _mm512_add_epi32(e, _mm512_set1_epi32(127));
  e = _mm512_slli_epi32(e, 23);
  return _mm512_mul_ps(p, _mm512_castsi512_ps(e));
}

inline __m512 tanh512(__m512 u) {
  const __m512 one = _mm512_set1_ps(1.0f);
  const __m512 e = exp512(_mm512_add_ps(u, u));
  const __m512 q = _mm512_div_ps(_mm512_set1_ps(2.0f), _mm512_add_ps(e, one));
  return _mm512_sub_ps(one, q);
}

void add_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(y + i, _mm512_add_ps(_mm512_loadu_ps(a + i),
                                          _mm512_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void sub_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(y + i, _mm512_sub_ps(_mm512_loadu_ps(a + i),
                                          _mm512_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void mul_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(y + i, _mm512_mul_ps(_mm512_loadu_ps(a + i),
                                          _mm512_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void axpby_f(std::size_t n, float alpha, const float* x, float beta,
             float* y) {
  const __m512 va = _mm512_set1_ps(alpha);
  std::size_t i = 0;
  if (beta == 0.0f) {
    for (; i + 16 <= n; i += 16)
      _mm512_storeu_ps(y + i, _mm512_mul_ps(va, _mm512_loadu_ps(x + i)));
    for (; i < n; ++i) y[i] = alpha * x[i];
  } else {
    const __m512 vb = _mm512_set1_ps(beta);
    for (; i + 16 <= n; i += 16) {
      __m512 v = _mm512_mul_ps(vb, _mm512_loadu_ps(y + i));
      _mm512_storeu_ps(y + i, _mm512_fmadd_ps(va, _mm512_loadu_ps(x + i), v));
    }
    for (; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
  }
}

float dot_f(std::size_t n, const float* a, const float* b) {
  __m512 acc = _mm512_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc);
  float s = _mm512_reduce_add_ps(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float sum_f(std::size_t n, const float* x) {
  __m512 acc = _mm512_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    acc = _mm512_add_ps(acc, _mm512_loadu_ps(x + i));
  float s = _mm512_reduce_add_ps(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float max_f(std::size_t n, const float* x) {
  std::size_t i = 0;
  float m = x[0];
  if (n >= 16) {
    __m512 acc = _mm512_loadu_ps(x);
    for (i = 16; i + 16 <= n; i += 16)
      acc = _mm512_max_ps(acc, _mm512_loadu_ps(x + i));
    m = _mm512_reduce_max_ps(acc);
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

bool all_finite_f(std::size_t n, const float* x) {
  const __m512 lim = _mm512_set1_ps(FLT_MAX);
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    const __m512 ax = _mm512_abs_ps(_mm512_loadu_ps(x + i));
    if (_mm512_cmp_ps_mask(ax, lim, _CMP_LE_OQ) != 0xFFFF) return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

void vexp_f(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(y + i, exp512(_mm512_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}

constexpr float kC0 = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kC1 = 0.044715f;

void gelu_f(std::size_t n, const float* x, float* y) {
  const __m512 c0 = _mm512_set1_ps(kC0);
  const __m512 c1 = _mm512_set1_ps(kC1);
  const __m512 half = _mm512_set1_ps(0.5f);
  const __m512 one = _mm512_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    const __m512 v = _mm512_loadu_ps(x + i);
    const __m512 v3 = _mm512_mul_ps(_mm512_mul_ps(v, v), v);
    const __m512 u = _mm512_mul_ps(c0, _mm512_fmadd_ps(c1, v3, v));
    const __m512 t = tanh512(u);
    _mm512_storeu_ps(
        y + i, _mm512_mul_ps(_mm512_mul_ps(half, v), _mm512_add_ps(one, t)));
  }
  for (; i < n; ++i) {
    const float v = x[i];
    const float t = std::tanh(kC0 * (v + kC1 * v * v * v));
    y[i] = 0.5f * v * (1.0f + t);
  }
}

void gelu_grad_f(std::size_t n, const float* x, const float* g, float* dx) {
  const __m512 c0 = _mm512_set1_ps(kC0);
  const __m512 c1 = _mm512_set1_ps(kC1);
  const __m512 c13 = _mm512_set1_ps(3.0f * kC1);
  const __m512 half = _mm512_set1_ps(0.5f);
  const __m512 one = _mm512_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    const __m512 v = _mm512_loadu_ps(x + i);
    const __m512 v2 = _mm512_mul_ps(v, v);
    const __m512 u =
        _mm512_mul_ps(c0, _mm512_fmadd_ps(c1, _mm512_mul_ps(v2, v), v));
    const __m512 t = tanh512(u);
    const __m512 du = _mm512_mul_ps(c0, _mm512_fmadd_ps(c13, v2, one));
    const __m512 sech2 = _mm512_fnmadd_ps(t, t, one);
    __m512 d = _mm512_mul_ps(half, _mm512_add_ps(one, t));
    d = _mm512_fmadd_ps(_mm512_mul_ps(half, v), _mm512_mul_ps(sech2, du), d);
    const __m512 acc =
        _mm512_fmadd_ps(_mm512_loadu_ps(g + i), d, _mm512_loadu_ps(dx + i));
    _mm512_storeu_ps(dx + i, acc);
  }
  for (; i < n; ++i) {
    const float v = x[i];
    const float t = std::tanh(kC0 * (v + kC1 * v * v * v));
    const float du = kC0 * (1.0f + 3.0f * kC1 * v * v);
    dx[i] += g[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
  }
}

void softmax_row_f(std::size_t n, const float* x, float inv_temp, float* y) {
  const float m = max_f(n, x);
  const __m512 vm = _mm512_set1_ps(m);
  const __m512 vt = _mm512_set1_ps(inv_temp);
  __m512 acc = _mm512_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    const __m512 e =
        exp512(_mm512_mul_ps(_mm512_sub_ps(_mm512_loadu_ps(x + i), vm), vt));
    _mm512_storeu_ps(y + i, e);
    acc = _mm512_add_ps(acc, e);
  }
  float s = _mm512_reduce_add_ps(acc);
  for (; i < n; ++i) {
    y[i] = std::exp((x[i] - m) * inv_temp);
    s += y[i];
  }
  const float inv = 1.0f / s;
  axpby_f(n, inv, y, 0.0f, y);
}

void adam_f(std::size_t n, float* p, const float* g, float* m, float* v,
            float lr, float beta1, float beta2, float eps, float wd, float bc1,
            float bc2) {
  const __m512 vb1 = _mm512_set1_ps(beta1);
  const __m512 vb2 = _mm512_set1_ps(beta2);
  const __m512 v1mb1 = _mm512_set1_ps(1.0f - beta1);
  const __m512 v1mb2 = _mm512_set1_ps(1.0f - beta2);
  const __m512 vlr = _mm512_set1_ps(lr);
  const __m512 veps = _mm512_set1_ps(eps);
  const __m512 vwd = _mm512_set1_ps(wd);
  const __m512 vbc1 = _mm512_set1_ps(bc1);
  const __m512 vbc2 = _mm512_set1_ps(bc2);
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    const __m512 gi = _mm512_loadu_ps(g + i);
    __m512 mi = _mm512_loadu_ps(m + i);
    __m512 vi = _mm512_loadu_ps(v + i);
    mi = _mm512_fmadd_ps(vb1, mi, _mm512_mul_ps(v1mb1, gi));
    vi = _mm512_fmadd_ps(vb2, vi, _mm512_mul_ps(v1mb2, _mm512_mul_ps(gi, gi)));
    _mm512_storeu_ps(m + i, mi);
    _mm512_storeu_ps(v + i, vi);
    const __m512 mhat = _mm512_mul_ps(mi, vbc1);
    const __m512 vhat = _mm512_mul_ps(vi, vbc2);
    const __m512 den = _mm512_add_ps(_mm512_sqrt_ps(vhat), veps);
    __m512 pi = _mm512_loadu_ps(p + i);
    __m512 upd = _mm512_fmadd_ps(vwd, pi, _mm512_div_ps(mhat, den));
    pi = _mm512_fnmadd_ps(vlr, upd, pi);
    _mm512_storeu_ps(p + i, pi);
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * bc1 / (std::sqrt(v[i] * bc2) + eps) + wd * p[i]);
  }
}

// ---------------------------------------------------------------------------
// Packed sgemm, 8x48 micro-kernel (24 zmm accumulators).
// ---------------------------------------------------------------------------

constexpr int MR = 8;
constexpr int NR = 48;
constexpr int MC = 128;
constexpr int KC = 256;
constexpr int NC = 240;  // multiple of NR

alignas(64) thread_local float Apack[MC * KC];
alignas(64) thread_local float Bpack[KC * NC];

void pack_a(bool ta, const float* a, int lda, int ic, int pc, int mc, int kc,
            float* ap) {
  for (int ir = 0; ir < mc; ir += MR) {
    const int rows = mc - ir < MR ? mc - ir : MR;
    float* dst = ap + static_cast<std::size_t>(ir) * kc;
    if (!ta) {
      const float* base = a + static_cast<std::size_t>(ic + ir) * lda + pc;
      for (int p = 0; p < kc; ++p) {
        for (int r = 0; r < rows; ++r)
          dst[p * MR + r] = base[static_cast<std::size_t>(r) * lda + p];
        for (int r = rows; r < MR; ++r) dst[p * MR + r] = 0.0f;
      }
    } else {
      const float* base = a + static_cast<std::size_t>(pc) * lda + ic + ir;
      for (int p = 0; p < kc; ++p) {
        const float* src = base + static_cast<std::size_t>(p) * lda;
        for (int r = 0; r < rows; ++r) dst[p * MR + r] = src[r];
        for (int r = rows; r < MR; ++r) dst[p * MR + r] = 0.0f;
      }
    }
  }
}

void pack_b(bool tb, const float* b, int ldb, int pc, int jc, int kc, int nc,
            float* bp) {
  for (int jr = 0; jr < nc; jr += NR) {
    const int cols = nc - jr < NR ? nc - jr : NR;
    float* dst = bp + static_cast<std::size_t>(jr) * kc;
    if (!tb) {
      const float* base = b + static_cast<std::size_t>(pc) * ldb + jc + jr;
      for (int p = 0; p < kc; ++p) {
        const float* src = base + static_cast<std::size_t>(p) * ldb;
        int c = 0;
        for (; c < cols; ++c) dst[p * NR + c] = src[c];
        for (; c < NR; ++c) dst[p * NR + c] = 0.0f;
      }
    } else {
      const float* base = b + static_cast<std::size_t>(jc + jr) * ldb + pc;
      for (int p = 0; p < kc; ++p) {
        int c = 0;
        for (; c < cols; ++c)
          dst[p * NR + c] = base[static_cast<std::size_t>(c) * ldb + p];
        for (; c < NR; ++c) dst[p * NR + c] = 0.0f;
      }
    }
  }
}

inline __mmask16 chunk_mask(int nr, int chunk) {
  const int lanes = nr - 16 * chunk;
  if (lanes >= 16) return static_cast<__mmask16>(0xFFFF);
  if (lanes <= 0) return static_cast<__mmask16>(0);
  return static_cast<__mmask16>((1u << lanes) - 1u);
}

void micro_8x48(int kc, const float* ap, const float* bp, float alpha,
                float beta, float* c, int ldc, int mr, int nr) {
  __m512 acc[MR][3];
  for (int r = 0; r < MR; ++r) {
    acc[r][0] = _mm512_setzero_ps();
    acc[r][1] = _mm512_setzero_ps();
    acc[r][2] = _mm512_setzero_ps();
  }
  for (int p = 0; p < kc; ++p) {
    const __m512 b0 = _mm512_load_ps(bp + p * NR);
    const __m512 b1 = _mm512_load_ps(bp + p * NR + 16);
    const __m512 b2 = _mm512_load_ps(bp + p * NR + 32);
    const float* arow = ap + p * MR;
    for (int r = 0; r < MR; ++r) {
      const __m512 av = _mm512_set1_ps(arow[r]);
      acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_ps(av, b2, acc[r][2]);
    }
  }
  const __m512 va = _mm512_set1_ps(alpha);
  const __m512 vb = _mm512_set1_ps(beta);
  if (nr == NR) {
    for (int r = 0; r < mr; ++r) {
      float* crow = c + static_cast<std::size_t>(r) * ldc;
      __m512 v0 = _mm512_mul_ps(va, acc[r][0]);
      __m512 v1 = _mm512_mul_ps(va, acc[r][1]);
      __m512 v2 = _mm512_mul_ps(va, acc[r][2]);
      if (beta != 0.0f) {
        v0 = _mm512_fmadd_ps(vb, _mm512_loadu_ps(crow), v0);
        v1 = _mm512_fmadd_ps(vb, _mm512_loadu_ps(crow + 16), v1);
        v2 = _mm512_fmadd_ps(vb, _mm512_loadu_ps(crow + 32), v2);
      }
      _mm512_storeu_ps(crow, v0);
      _mm512_storeu_ps(crow + 16, v1);
      _mm512_storeu_ps(crow + 32, v2);
    }
    return;
  }
  const __mmask16 m0 = chunk_mask(nr, 0);
  const __mmask16 m1 = chunk_mask(nr, 1);
  const __mmask16 m2 = chunk_mask(nr, 2);
  for (int r = 0; r < mr; ++r) {
    float* crow = c + static_cast<std::size_t>(r) * ldc;
    __m512 v0 = _mm512_mul_ps(va, acc[r][0]);
    __m512 v1 = _mm512_mul_ps(va, acc[r][1]);
    __m512 v2 = _mm512_mul_ps(va, acc[r][2]);
    if (beta != 0.0f) {
      v0 = _mm512_fmadd_ps(vb, _mm512_maskz_loadu_ps(m0, crow), v0);
      if (m1) v1 = _mm512_fmadd_ps(vb, _mm512_maskz_loadu_ps(m1, crow + 16), v1);
      if (m2) v2 = _mm512_fmadd_ps(vb, _mm512_maskz_loadu_ps(m2, crow + 32), v2);
    }
    _mm512_mask_storeu_ps(crow, m0, v0);
    if (m1) _mm512_mask_storeu_ps(crow + 16, m1, v1);
    if (m2) _mm512_mask_storeu_ps(crow + 32, m2, v2);
  }
}

void scale_c(int m, int n, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0f) {
      for (int j = 0; j < n; ++j) crow[j] = 0.0f;
    } else {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
}

void sgemm_f(bool ta, bool tb, int m, int n, int k, float alpha,
             const float* a, int lda, const float* b, int ldb, float beta,
             float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0 || alpha == 0.0f) {
    if (beta != 1.0f) scale_c(m, n, beta, c, ldc);
    return;
  }
  for (int jc = 0; jc < n; jc += NC) {
    const int nc = n - jc < NC ? n - jc : NC;
    for (int pc = 0; pc < k; pc += KC) {
      const int kc = k - pc < KC ? k - pc : KC;
      const float beta_eff = pc == 0 ? beta : 1.0f;
      pack_b(tb, b, ldb, pc, jc, kc, nc, Bpack);
      for (int ic = 0; ic < m; ic += MC) {
        const int mc = m - ic < MC ? m - ic : MC;
        pack_a(ta, a, lda, ic, pc, mc, kc, Apack);
        for (int jr = 0; jr < nc; jr += NR) {
          const int nr = nc - jr < NR ? nc - jr : NR;
          for (int ir = 0; ir < mc; ir += MR) {
            const int mr = mc - ir < MR ? mc - ir : MR;
            micro_8x48(kc, Apack + static_cast<std::size_t>(ir) * kc,
                       Bpack + static_cast<std::size_t>(jr) * kc, alpha,
                       beta_eff,
                       c + static_cast<std::size_t>(ic + ir) * ldc + jc + jr,
                       ldc, mr, nr);
          }
        }
      }
    }
  }
}

}  // namespace

const Kernels& avx512_table() {
  static const Kernels k = {
      "avx512", &sgemm_f, &add_f,        &sub_f,  &mul_f,
      &axpby_f, &dot_f,   &sum_f,        &max_f,  &all_finite_f,
      &vexp_f,  &gelu_f,  &gelu_grad_f,  &softmax_row_f, &adam_f,
  };
  return k;
}

}  // namespace svt::kern
