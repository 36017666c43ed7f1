#pragma once
// Float kernels for the dense inner loops of the inference engine.
// A scalar reference implementation plus SIMD variants (AVX2 on x86-64,
// NEON on aarch64), selected once at startup through a dispatch table.
// Every variant is equivalence-tested against the scalar reference.
//
// Reductions (dot, sumsq) accumulate in double so that variant-to-variant
// differences stay far below the tolerances the engine is tested at.
// Element-wise kernels (axpy, matvec_rows) keep the same per-element
// summation order in all variants.

#include <cstddef>
#include <string_view>

namespace selfprune::kernels {

enum class Backend { scalar, avx2, neon };

// Backend currently behind the dispatched entry points. Auto-detected on
// first use.
Backend active_backend();

// Override the dispatch table (tests and benchmarks). Throws
// std::invalid_argument if the requested backend was not compiled in or is
// not supported by the running CPU. Not thread-safe; call before spawning
// evaluators.
void force_backend(Backend b);

std::string_view backend_name(Backend b);

// y[i] += a * x[i]
void axpy(float a, const float* x, float* y, std::size_t n);

// y[o] = sum_i x[i] * w[i*out + o]; w is row-major with one row per input
// channel, so the vector lanes run over output channels and each output
// keeps the scalar summation order.
void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y);

// sum_i a[i] * b[i], accumulated in double
double dot(const float* a, const float* b, std::size_t n);

// sum_i x[i]^2, accumulated in double
double sumsq(const float* x, std::size_t n);

// acc[i] += x[i]^2 in double; per-channel calibration accumulation
void accum_sq(const float* x, double* acc, std::size_t n);

namespace scalar {
void axpy(float a, const float* x, float* y, std::size_t n);
void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y);
double dot(const float* a, const float* b, std::size_t n);
double sumsq(const float* x, std::size_t n);
void accum_sq(const float* x, double* acc, std::size_t n);
}  // namespace scalar

#if defined(SELFPRUNE_HAVE_AVX2)
namespace avx2 {
void axpy(float a, const float* x, float* y, std::size_t n);
void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y);
double dot(const float* a, const float* b, std::size_t n);
double sumsq(const float* x, std::size_t n);
void accum_sq(const float* x, double* acc, std::size_t n);
}  // namespace avx2
#endif

#if defined(SELFPRUNE_HAVE_NEON)
namespace neon {
void axpy(float a, const float* x, float* y, std::size_t n);
void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y);
double dot(const float* a, const float* b, std::size_t n);
double sumsq(const float* x, std::size_t n);
void accum_sq(const float* x, double* acc, std::size_t n);
}  // namespace neon
#endif

}  // namespace selfprune::kernels
