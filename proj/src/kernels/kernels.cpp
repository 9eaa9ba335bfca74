#include "histonet/kernels.hpp"

#include <cstdlib>
#include <cstring>

#include "histonet/errors.hpp"

namespace histonet::kernels {

namespace scalar {

void add(const double* a, const double* b, double* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}

void scale(const double* a, double s, double* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] * s;
}

void axpy(double s, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + s * x[i];
}

void relu(const double* a, double* c, std::size_t n) {
  // x > 0 ? x : 0 maps -0.0 to +0.0, matching _mm256_max_pd(x, 0).
  for (std::size_t i = 0; i < n; ++i) c[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = acc + a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void conv_row(const double* x, const double* w, double* out, std::size_t channels,
              std::size_t xh, std::size_t xw, std::size_t kh, std::size_t kw,
              std::size_t oh, std::size_t out_w, std::size_t stride) {
  (void)xh;
  for (std::size_t ow = 0; ow < out_w; ++ow) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double* xc = x + c * xh * xw;
      const double* wc = w + c * kh * kw;
      for (std::size_t i = 0; i < kh; ++i) {
        const double* xrow = xc + (oh * stride + i) * xw + ow * stride;
        const double* wrow = wc + i * kw;
        for (std::size_t j = 0; j < kw; ++j) acc = acc + wrow[j] * xrow[j];
      }
    }
    out[ow] = acc;
  }
}

}  // namespace scalar

namespace {

constexpr Table kScalarTable = {
    scalar::add, scalar::sub,  scalar::mul,    scalar::scale,
    scalar::axpy, scalar::relu, scalar::matmul, scalar::conv_row,
};

}  // namespace

#if defined(HISTONET_HAVE_AVX2)
namespace avx2 {
extern const Table table;
}
#endif

namespace {

bool cpu_has_avx2() {
#if defined(HISTONET_HAVE_AVX2) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Backend pick_default_backend() {
  if (const char* env = std::getenv("HISTONET_SIMD")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0 && cpu_has_avx2()) return Backend::avx2;
    return Backend::scalar;
  }
  return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

Backend g_backend = pick_default_backend();

}  // namespace

bool backend_available(Backend backend) {
  switch (backend) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
      return cpu_has_avx2();
  }
  return false;
}

const Table& table_for(Backend backend) {
#if defined(HISTONET_HAVE_AVX2)
  if (backend == Backend::avx2) return avx2::table;
#else
  if (backend == Backend::avx2) throw ConfigError("AVX2 kernels not built on this target");
#endif
  return kScalarTable;
}

const Table& active() { return table_for(g_backend); }

Backend active_backend() { return g_backend; }

void force_backend(Backend backend) {
  if (!backend_available(backend))
    throw ConfigError("kernel backend unavailable: " + backend_name(backend));
  g_backend = backend;
}

std::string backend_name(Backend backend) {
  return backend == Backend::avx2 ? "avx2" : "scalar";
}

}  // namespace histonet::kernels
