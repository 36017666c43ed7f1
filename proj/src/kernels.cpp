#include "selfprune/kernels.hpp"

#include <cstring>
#include <stdexcept>

namespace selfprune::kernels {

namespace scalar {

void axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y) {
  if (out == 0) return;
  std::memset(y, 0, out * sizeof(float));
  for (std::size_t i = 0; i < in; ++i) {
    const float a = x[i];
    const float* row = w + i * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += a * row[o];
  }
}

double dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

double sumsq(const float* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  return acc;
}

void accum_sq(const float* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(x[i]) * static_cast<double>(x[i]);
}

}  // namespace scalar

namespace {

struct Table {
  void (*axpy)(float, const float*, float*, std::size_t);
  void (*matvec_rows)(const float*, const float*, std::size_t, std::size_t, float*);
  double (*dot)(const float*, const float*, std::size_t);
  double (*sumsq)(const float*, std::size_t);
  void (*accum_sq)(const float*, double*, std::size_t);
};

constexpr Table kScalarTable{scalar::axpy, scalar::matvec_rows, scalar::dot, scalar::sumsq,
                             scalar::accum_sq};

#if defined(SELFPRUNE_HAVE_AVX2)
constexpr Table kAvx2Table{avx2::axpy, avx2::matvec_rows, avx2::dot, avx2::sumsq, avx2::accum_sq};
#endif
#if defined(SELFPRUNE_HAVE_NEON)
constexpr Table kNeonTable{neon::axpy, neon::matvec_rows, neon::dot, neon::sumsq, neon::accum_sq};
#endif

bool backend_usable(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(SELFPRUNE_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::neon:
#if defined(SELFPRUNE_HAVE_NEON)
      return true;  // baseline on aarch64
#else
      return false;
#endif
  }
  return false;
}

Backend detect() {
  if (backend_usable(Backend::avx2)) return Backend::avx2;
  if (backend_usable(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

const Table& table_for(Backend b) {
  switch (b) {
#if defined(SELFPRUNE_HAVE_AVX2)
    case Backend::avx2:
      return kAvx2Table;
#endif
#if defined(SELFPRUNE_HAVE_NEON)
    case Backend::neon:
      return kNeonTable;
#endif
    default:
      return kScalarTable;
  }
}

Backend g_backend = detect();
const Table* g_table = &table_for(g_backend);

}  // namespace

Backend active_backend() { return g_backend; }

void force_backend(Backend b) {
  if (!backend_usable(b)) {
    throw std::invalid_argument("force_backend: backend not available: " +
                                std::string(backend_name(b)));
  }
  g_backend = b;
  g_table = &table_for(b);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
    case Backend::neon:
      return "neon";
  }
  return "unknown";
}

void axpy(float a, const float* x, float* y, std::size_t n) { g_table->axpy(a, x, y, n); }

void matvec_rows(const float* w, const float* x, std::size_t in, std::size_t out, float* y) {
  g_table->matvec_rows(w, x, in, out, y);
}

double dot(const float* a, const float* b, std::size_t n) { return g_table->dot(a, b, n); }

double sumsq(const float* x, std::size_t n) { return g_table->sumsq(x, n); }

void accum_sq(const float* x, double* acc, std::size_t n) { g_table->accum_sq(x, acc, n); }

}  // namespace selfprune::kernels
