// NEON kernel variants for aarch64, where NEON is baseline.

#include "selfprune/kernels.hpp"

#if defined(__ARM_NEON) || defined(__aarch64__)

#include <arm_neon.h>

#include <cstring>

namespace selfprune::kernels::neon {

void axpy(float a, const float* x, float* y, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vy = vld1q_f32(y + i);
    vy = vfmaq_f32(vy, va, vld1q_f32(x + i));
    vst1q_f32(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y) {
  if (out == 0) return;
  std::memset(y, 0, out * sizeof(float));
  for (std::size_t i = 0; i < in; ++i) {
    const float a = x[i];
    const float* row = w + i * out;
    const float32x4_t va = vdupq_n_f32(a);
    std::size_t o = 0;
    for (; o + 4 <= out; o += 4) {
      float32x4_t vy = vld1q_f32(y + o);
      vy = vfmaq_f32(vy, va, vld1q_f32(row + o));
      vst1q_f32(y + o, vy);
    }
    for (; o < out; ++o) y[o] += a * row[o];
  }
}

double dot(const float* a, const float* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t va = vld1q_f32(a + i);
    const float32x4_t vb = vld1q_f32(b + i);
    acc0 = vfmaq_f64(acc0, vcvt_f64_f32(vget_low_f32(va)), vcvt_f64_f32(vget_low_f32(vb)));
    acc1 = vfmaq_f64(acc1, vcvt_f64_f32(vget_high_f32(va)), vcvt_f64_f32(vget_high_f32(vb)));
  }
  const float64x2_t accv = vaddq_f64(acc0, acc1);
  double acc = vgetq_lane_f64(accv, 0) + vgetq_lane_f64(accv, 1);
  for (; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

double sumsq(const float* x, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t vx = vld1q_f32(x + i);
    const float64x2_t lo = vcvt_f64_f32(vget_low_f32(vx));
    const float64x2_t hi = vcvt_f64_f32(vget_high_f32(vx));
    acc0 = vfmaq_f64(acc0, lo, lo);
    acc1 = vfmaq_f64(acc1, hi, hi);
  }
  const float64x2_t accv = vaddq_f64(acc0, acc1);
  double acc = vgetq_lane_f64(accv, 0) + vgetq_lane_f64(accv, 1);
  for (; i < n; ++i) acc += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  return acc;
}

void accum_sq(const float* x, double* acc, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t vx = vcvt_f64_f32(vld1_f32(x + i));
    float64x2_t va = vld1q_f64(acc + i);
    va = vfmaq_f64(va, vx, vx);
    vst1q_f64(acc + i, va);
  }
  for (; i < n; ++i) acc[i] += static_cast<double>(x[i]) * static_cast<double>(x[i]);
}

}  // namespace selfprune::kernels::neon

#else
#error "kernels_neon.cpp requires NEON"
#endif
