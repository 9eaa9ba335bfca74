#pragma once

#include <cstddef>
#include <string>

namespace histonet::kernels {

// Data-parallel inner loops behind the tensor ops. Each kernel has a scalar
// reference implementation and, on x86-64, an AVX2 variant selected at
// runtime. Variants are written to be bit-identical to the scalar reference:
// per-element operation order is preserved and no FMA contraction is used,
// so dispatch never changes results. Equivalence is enforced by tests.
struct Table {
  // c[i] = a[i] op b[i]
  void (*add)(const double* a, const double* b, double* c, std::size_t n);
  void (*sub)(const double* a, const double* b, double* c, std::size_t n);
  void (*mul)(const double* a, const double* b, double* c, std::size_t n);
  // c[i] = a[i] * s
  void (*scale)(const double* a, double s, double* c, std::size_t n);
  // y[i] += s * x[i]
  void (*axpy)(double s, const double* x, double* y, std::size_t n);
  // c[i] = a[i] > 0 ? a[i] : 0
  void (*relu)(const double* a, double* c, std::size_t n);
  // C[m x n] = A[m x k] * B[k x n], row-major, C overwritten.
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
  // One output row of a direct convolution over a zero-padded input plane set:
  //   out[ow] = sum_{c,i,j} w[c*kh*kw + i*kw + j] *
  //             x[c*xh*xw + (oh*stride+i)*xw + (ow*stride+j)]
  // x points at the padded input for one (batch, group); w at the kernel for
  // one output channel of that group.
  void (*conv_row)(const double* x, const double* w, double* out, std::size_t channels,
                   std::size_t xh, std::size_t xw, std::size_t kh, std::size_t kw,
                   std::size_t oh, std::size_t out_w, std::size_t stride);
};

enum class Backend { scalar, avx2 };

// Table for the backend chosen at startup (AVX2 when the CPU supports it).
const Table& active();
Backend active_backend();

// Explicit access for equivalence tests and the HISTONET_SIMD=scalar override.
const Table& table_for(Backend backend);
bool backend_available(Backend backend);
void force_backend(Backend backend);  // throws ConfigError if unavailable

std::string backend_name(Backend backend);

}  // namespace histonet::kernels
