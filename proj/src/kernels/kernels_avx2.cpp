// AVX2 variants of the scalar kernels. Compiled with -mavx2 only; every loop
// keeps the scalar per-element operation order and uses mul+add (never FMA),
// so outputs are bit-identical to the scalar reference.

#include <immintrin.h>

#include <cstddef>

#include "histonet/kernels.hpp"

namespace histonet::kernels::avx2 {

namespace {

void add(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* c, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

void scale(const double* a, double s, double* c, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
  }
  for (; i < n; ++i) c[i] = a[i] * s;
}

void axpy(double s, const double* x, double* y, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(vs, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + s * x[i];
}

void relu(const double* a, double* c, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_max_pd(_mm256_loadu_pd(a + i), zero));
  }
  for (; i < n; ++i) c[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256d acc = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d bv = _mm256_loadu_pd(b + p * n + j);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_set1_pd(arow[p]), bv));
      }
      _mm256_storeu_pd(crow + j, acc);
    }
    for (; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = acc + arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

void conv_row(const double* x, const double* w, double* out, std::size_t channels,
              std::size_t xh, std::size_t xw, std::size_t kh, std::size_t kw,
              std::size_t oh, std::size_t out_w, std::size_t stride) {
  (void)xh;
  if (stride == 1) {
    std::size_t ow = 0;
    for (; ow + 4 <= out_w; ow += 4) {
      __m256d acc = _mm256_setzero_pd();
      for (std::size_t c = 0; c < channels; ++c) {
        const double* xc = x + c * xh * xw;
        const double* wc = w + c * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          const double* xrow = xc + (oh + i) * xw + ow;
          const double* wrow = wc + i * kw;
          for (std::size_t j = 0; j < kw; ++j) {
            const __m256d xv = _mm256_loadu_pd(xrow + j);
            acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_set1_pd(wrow[j]), xv));
          }
        }
      }
      _mm256_storeu_pd(out + ow, acc);
    }
    for (; ow < out_w; ++ow) {
      double acc = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* xc = x + c * xh * xw;
        const double* wc = w + c * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          const double* xrow = xc + (oh + i) * xw + ow;
          const double* wrow = wc + i * kw;
          for (std::size_t j = 0; j < kw; ++j) acc = acc + wrow[j] * xrow[j];
        }
      }
      out[ow] = acc;
    }
    return;
  }
  // Strided case: gather loads would not pay off at these sizes.
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

}  // namespace

extern const Table table = {add, sub, mul, scale, axpy, relu, matmul, conv_row};

}  // namespace histonet::kernels::avx2
