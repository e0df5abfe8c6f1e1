#pragma once

#include <cstddef>
#include <cstdint>

namespace svt::kern {

// Instruction-set lanes. `scalar` is the reference implementation; the SIMD
// lanes must agree with it to float tolerance (see tests/test_kernels.cpp).
enum class Isa { scalar = 0, avx2 = 1, avx512 = 2 };

// Table of float32 compute kernels. All buffers are row-major; `ld*` are row
// strides in elements. Reductions use a fixed lane-then-tail order so results
// are reproducible for a given lane.
struct Kernels {
  const char* name;

  // C = alpha * op(A) * op(B) + beta * C
  // op(A) is m x k: if ta, A is stored k x m (lda >= m) and read transposed.
  // op(B) is k x n: if tb, B is stored n x k (ldb >= k) and read transposed.
  void (*sgemm)(bool ta, bool tb, int m, int n, int k, float alpha,
                const float* a, int lda, const float* b, int ldb, float beta,
                float* c, int ldc);

  void (*add)(std::size_t n, const float* a, const float* b, float* y);
  void (*sub)(std::size_t n, const float* a, const float* b, float* y);
  void (*mul)(std::size_t n, const float* a, const float* b, float* y);
  // y = alpha * x + beta * y
  void (*axpby)(std::size_t n, float alpha, const float* x, float beta,
                float* y);
  float (*dot)(std::size_t n, const float* a, const float* b);
  float (*sum)(std::size_t n, const float* x);
  float (*max)(std::size_t n, const float* x);
  bool (*all_finite)(std::size_t n, const float* x);
  void (*vexp)(std::size_t n, const float* x, float* y);
  // tanh-form gelu; gelu_grad accumulates: dx += g * gelu'(x)
  void (*gelu)(std::size_t n, const float* x, float* y);
  void (*gelu_grad)(std::size_t n, const float* x, const float* g, float* dx);
  // y = softmax(x * inv_temp) over one contiguous row, max-subtracted
  void (*softmax_row)(std::size_t n, const float* x, float inv_temp, float* y);
  // Adam with decoupled weight decay; bc = 1 / (1 - beta^t)
  void (*adam)(std::size_t n, float* p, const float* g, float* m, float* v,
               float lr, float beta1, float beta2, float eps, float wd,
               float bc1, float bc2);
};

bool isa_supported(Isa isa);
// Table for a specific lane; requires isa_supported(isa).
const Kernels& table(Isa isa);
// Lane chosen once per process: best supported, or the SVT_ISA env override
// (scalar | avx2 | avx512).
const Kernels& active();
Isa active_isa();
const char* isa_name(Isa isa);
// Test/bench hook; must not be called after training starts.
void force_isa(Isa isa);

}  // namespace svt::kern
