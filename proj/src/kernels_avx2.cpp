// AVX2 + FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; callers reach it only through the dispatch table after a
// cpuid check.

#include "selfprune/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cstring>

namespace selfprune::kernels::avx2 {

void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y) {
  if (out == 0) return;
  std::memset(y, 0, out * sizeof(float));
  for (std::size_t i = 0; i < in; ++i) {
    const float a = x[i];
    const float* row = w + i * out;
    const __m256 va = _mm256_set1_ps(a);
    std::size_t o = 0;
    for (; o + 8 <= out; o += 8) {
      __m256 vy = _mm256_loadu_ps(y + o);
      vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(row + o), vy);
      _mm256_storeu_ps(y + o, vy);
    }
    for (; o < out; ++o) y[o] += a * row[o];
  }
}

namespace {

// Widen the two 4-float halves of a 256-bit load to doubles and fold the
// four accumulator lanes in a fixed order at the end.
inline double fold4(__m256d acc) {
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, acc);
  return ((lanes[0] + lanes[1]) + lanes[2]) + lanes[3];
}

}  // namespace

double dot(const float* a, const float* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 va = _mm256_loadu_ps(a + i);
    const __m256 vb = _mm256_loadu_ps(b + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(va)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(vb)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(va, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(vb, 1)), acc1);
  }
  double acc = fold4(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

double sumsq(const float* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vx = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(vx));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(vx, 1));
    acc0 = _mm256_fmadd_pd(lo, lo, acc0);
    acc1 = _mm256_fmadd_pd(hi, hi, acc1);
  }
  double acc = fold4(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  return acc;
}

void accum_sq(const float* x, double* acc, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vx = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    __m256d va = _mm256_loadu_pd(acc + i);
    va = _mm256_fmadd_pd(vx, vx, va);
    _mm256_storeu_pd(acc + i, va);
  }
  for (; i < n; ++i) acc[i] += static_cast<double>(x[i]) * static_cast<double>(x[i]);
}

}  // namespace selfprune::kernels::avx2

#else
#error "kernels_avx2.cpp must be compiled with -mavx2 -mfma"
#endif
