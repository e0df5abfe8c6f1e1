// AVX2+FMA lane. Compiled with -mavx2 -mfma; only entered when the CPU
// reports support (see dispatch.cpp).

#include <immintrin.h>

#include <cfloat>
#include <cmath>
#include <cstddef>

#include "svt/kernels.hpp"

namespace svt::kern {
namespace {

// Polynomial exp, Cephes coefficients. |rel err| < 2 ulp on [-87, 88].
inline __m256 exp256(__m256 x) {
  x = _mm256_min_ps(x, _mm256_set1_ps(88.3762626647950f));
  x = _mm256_max_ps(x, _mm256_set1_ps(-87.3365447504019f));
  __m256 fx = _mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f));
  fx = _mm256_round_ps(fx, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
  const __m256 z = _mm256_mul_ps(x, x);
  __m256 p = _mm256_set1_ps(1.9875691500e-4f);
  p = _mm256_fmadd_ps(p, x, _mm256_set1_ps(1.3981999507e-3f));
  p = _mm256_fmadd_ps(p, x, _mm256_set1_ps(8.3334519073e-3f));
  p = _mm256_fmadd_ps(p, x, _mm256_set1_ps(4.1665795894e-2f));
  p = _mm256_fmadd_ps(p, x, _mm256_set1_ps(1.6666665459e-1f));
  p = _mm256_fmadd_ps(p, x, _mm256_set1_ps(5.0000001201e-1f));
  p = _mm256_fmadd_ps(p, z, x);
  p = _mm256_add_ps(p, _mm256_set1_ps(1.0f));
  __m256i e = _mm256_cvtps_epi32(fx);
  e = _mm256_add_epi32(e, _mm256_set1_epi32(127));
  e = _mm256_slli_epi32(e, 23);
  return _mm256_mul_ps(p, _mm256_castsi256_ps(e));
}

inline __m256 tanh256(__m256 u) {
  // tanh(u) = 1 - 2 / (exp(2u) + 1); exp clamp keeps the ends exact.
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 e = exp256(_mm256_add_ps(u, u));
  const __m256 q = _mm256_div_ps(_mm256_set1_ps(2.0f), _mm256_add_ps(e, one));
  return _mm256_sub_ps(one, q);
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline float hmax(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

void add_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void sub_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void mul_f(std::size_t n, const float* a, const float* b, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void axpby_f(std::size_t n, float alpha, const float* x, float beta,
             float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  if (beta == 0.0f) {
    for (; i + 8 <= n; i += 8)
      _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) y[i] = alpha * x[i];
  } else {
    const __m256 vb = _mm256_set1_ps(beta);
    for (; i + 8 <= n; i += 8) {
      __m256 v = _mm256_mul_ps(vb, _mm256_loadu_ps(y + i));
      _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), v));
    }
    for (; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
  }
}

float dot_f(std::size_t n, const float* a, const float* b) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float sum_f(std::size_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float max_f(std::size_t n, const float* x) {
  std::size_t i = 0;
  float m = x[0];
  if (n >= 8) {
    __m256 acc = _mm256_loadu_ps(x);
    for (i = 8; i + 8 <= n; i += 8)
      acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
    m = hmax(acc);
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

bool all_finite_f(std::size_t n, const float* x) {
  const __m256 lim = _mm256_set1_ps(FLT_MAX);
  const __m256 absmask = _mm256_castsi256_ps(_mm256_set1_epi32(0x7FFFFFFF));
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 ax = _mm256_and_ps(_mm256_loadu_ps(x + i), absmask);
    // ordered-LE: NaN lanes compare false
    if (_mm256_movemask_ps(_mm256_cmp_ps(ax, lim, _CMP_LE_OQ)) != 0xFF)
      return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

void vexp_f(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, exp256(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}

constexpr float kC0 = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kC1 = 0.044715f;

void gelu_f(std::size_t n, const float* x, float* y) {
  const __m256 c0 = _mm256_set1_ps(kC0);
  const __m256 c1 = _mm256_set1_ps(kC1);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 v3 = _mm256_mul_ps(_mm256_mul_ps(v, v), v);
    const __m256 u = _mm256_mul_ps(c0, _mm256_fmadd_ps(c1, v3, v));
    const __m256 t = tanh256(u);
    _mm256_storeu_ps(
        y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
  }
  for (; i < n; ++i) {
    const float v = x[i];
    const float t = std::tanh(kC0 * (v + kC1 * v * v * v));
    y[i] = 0.5f * v * (1.0f + t);
  }
}

void gelu_grad_f(std::size_t n, const float* x, const float* g, float* dx) {
  const __m256 c0 = _mm256_set1_ps(kC0);
  const __m256 c1 = _mm256_set1_ps(kC1);
  const __m256 c13 = _mm256_set1_ps(3.0f * kC1);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 v2 = _mm256_mul_ps(v, v);
    const __m256 u = _mm256_mul_ps(
        c0, _mm256_fmadd_ps(c1, _mm256_mul_ps(v2, v), v));
    const __m256 t = tanh256(u);
    const __m256 du = _mm256_mul_ps(c0, _mm256_fmadd_ps(c13, v2, one));
    const __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
    __m256 d = _mm256_mul_ps(half, _mm256_add_ps(one, t));
    d = _mm256_fmadd_ps(_mm256_mul_ps(half, v), _mm256_mul_ps(sech2, du), d);
    const __m256 acc =
        _mm256_fmadd_ps(_mm256_loadu_ps(g + i), d, _mm256_loadu_ps(dx + i));
    _mm256_storeu_ps(dx + i, acc);
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
  const __m256 vm = _mm256_set1_ps(m);
  const __m256 vt = _mm256_set1_ps(inv_temp);
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 e =
        exp256(_mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(x + i), vm), vt));
    _mm256_storeu_ps(y + i, e);
    acc = _mm256_add_ps(acc, e);
  }
  float s = hsum(acc);
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
  const __m256 vb1 = _mm256_set1_ps(beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2);
  const __m256 v1mb1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 v1mb2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 vlr = _mm256_set1_ps(lr);
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 vwd = _mm256_set1_ps(wd);
  const __m256 vbc1 = _mm256_set1_ps(bc1);
  const __m256 vbc2 = _mm256_set1_ps(bc2);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gi = _mm256_loadu_ps(g + i);
    __m256 mi = _mm256_loadu_ps(m + i);
    __m256 vi = _mm256_loadu_ps(v + i);
    mi = _mm256_fmadd_ps(vb1, mi, _mm256_mul_ps(v1mb1, gi));
    vi = _mm256_fmadd_ps(vb2, vi, _mm256_mul_ps(v1mb2, _mm256_mul_ps(gi, gi)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 mhat = _mm256_mul_ps(mi, vbc1);
    const __m256 vhat = _mm256_mul_ps(vi, vbc2);
    const __m256 den = _mm256_add_ps(_mm256_sqrt_ps(vhat), veps);
    __m256 pi = _mm256_loadu_ps(p + i);
    __m256 upd = _mm256_fmadd_ps(vwd, pi, _mm256_div_ps(mhat, den));
    pi = _mm256_fnmadd_ps(vlr, upd, pi);
    _mm256_storeu_ps(p + i, pi);
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * bc1 / (std::sqrt(v[i] * bc2) + eps) + wd * p[i]);
  }
}

// ---------------------------------------------------------------------------
// Packed sgemm, 6x16 micro-kernel.
// ---------------------------------------------------------------------------

constexpr int MR = 6;
constexpr int NR = 16;
constexpr int MC = 132;  // multiple of MR
constexpr int KC = 256;
constexpr int NC = 256;  // multiple of NR

alignas(64) thread_local float Apack[MC * KC];
alignas(64) thread_local float Bpack[KC * NC];

// A block is mc x kc starting at logical (ic, pc); storage layout depends on ta.
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
      // stored k x m: logical (i, p) lives at a[p * lda + i]
      const float* base = a + static_cast<std::size_t>(pc) * lda + ic + ir;
      for (int p = 0; p < kc; ++p) {
        const float* src = base + static_cast<std::size_t>(p) * lda;
        for (int r = 0; r < rows; ++r) dst[p * MR + r] = src[r];
        for (int r = rows; r < MR; ++r) dst[p * MR + r] = 0.0f;
      }
    }
  }
}

// B block is kc x nc starting at logical (pc, jc).
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
      // stored n x k: logical (p, j) lives at b[j * ldb + p]
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

inline __m256i tail_mask(int lanes) {
  alignas(32) static const int bits[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                           0,  0,  0,  0,  0,  0,  0,  0};
  return _mm256_loadu_si256(
      reinterpret_cast<const __m256i*>(bits + 8 - lanes));
}

void micro_6x16(int kc, const float* ap, const float* bp, float alpha,
                float beta, float* c, int ldc, int mr, int nr) {
  __m256 acc[MR][2];
  for (int r = 0; r < MR; ++r) {
    acc[r][0] = _mm256_setzero_ps();
    acc[r][1] = _mm256_setzero_ps();
  }
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_load_ps(bp + p * NR);
    const __m256 b1 = _mm256_load_ps(bp + p * NR + 8);
    const float* arow = ap + p * MR;
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_set1_ps(arow[r]);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  const __m256 va = _mm256_set1_ps(alpha);
  const __m256 vb = _mm256_set1_ps(beta);
  if (nr == NR) {
    for (int r = 0; r < mr; ++r) {
      float* crow = c + static_cast<std::size_t>(r) * ldc;
      __m256 v0 = _mm256_mul_ps(va, acc[r][0]);
      __m256 v1 = _mm256_mul_ps(va, acc[r][1]);
      if (beta != 0.0f) {
        v0 = _mm256_fmadd_ps(vb, _mm256_loadu_ps(crow), v0);
        v1 = _mm256_fmadd_ps(vb, _mm256_loadu_ps(crow + 8), v1);
      }
      _mm256_storeu_ps(crow, v0);
      _mm256_storeu_ps(crow + 8, v1);
    }
    return;
  }
  const int lo = nr < 8 ? nr : 8;
  const int hi = nr - lo;
  const __m256i m0 = tail_mask(lo);
  const __m256i m1 = tail_mask(hi);
  for (int r = 0; r < mr; ++r) {
    float* crow = c + static_cast<std::size_t>(r) * ldc;
    __m256 v0 = _mm256_mul_ps(va, acc[r][0]);
    __m256 v1 = _mm256_mul_ps(va, acc[r][1]);
    if (beta != 0.0f) {
      v0 = _mm256_fmadd_ps(vb, _mm256_maskload_ps(crow, m0), v0);
      if (hi) v1 = _mm256_fmadd_ps(vb, _mm256_maskload_ps(crow + 8, m1), v1);
    }
    _mm256_maskstore_ps(crow, m0, v0);
    if (hi) _mm256_maskstore_ps(crow + 8, m1, v1);
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
            micro_6x16(kc, Apack + static_cast<std::size_t>(ir) * kc,
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

const Kernels& avx2_table() {
  static const Kernels k = {
      "avx2",   &sgemm_f, &add_f,        &sub_f,  &mul_f,
      &axpby_f, &dot_f,   &sum_f,        &max_f,  &all_finite_f,
      &vexp_f,  &gelu_f,  &gelu_grad_f,  &softmax_row_f, &adam_f,
  };
  return k;
}

}  // namespace svt::kern
