#include <cstdint>
#include <vector>

#include "histonet/errors.hpp"
#include "histonet/kernels.hpp"
#include "histonet/ops.hpp"
#include "histonet/tensor.hpp"

namespace histonet::ops {

namespace {

// bt[n x m] = b[m x n]^T
void transpose_into(const double* b, std::int64_t m, std::int64_t n, double* bt) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) bt[j * m + i] = b[i * n + j];
  }
}

// Accumulates dA += dC * B^T and dB += A^T * dC for one [m,k]x[k,n] product.
void matmul_backward_slice(const double* a, const double* b, const double* dc, std::int64_t m,
                           std::int64_t k, std::int64_t n, double* da, double* db) {
  const auto& kt = kernels::active();
  if (da != nullptr) {
    std::vector<double> bt(static_cast<std::size_t>(k * n));
    transpose_into(b, k, n, bt.data());
    std::vector<double> tmp(static_cast<std::size_t>(m * k));
    kt.matmul(dc, bt.data(), tmp.data(), m, n, k);
    kt.axpy(1.0, tmp.data(), da, tmp.size());
  }
  if (db != nullptr) {
    std::vector<double> at(static_cast<std::size_t>(m * k));
    transpose_into(a, m, k, at.data());
    std::vector<double> tmp(static_cast<std::size_t>(k * n));
    kt.matmul(at.data(), dc, tmp.data(), k, m, n);
    kt.axpy(1.0, tmp.data(), db, tmp.size());
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0);
  const std::int64_t k = a.dim(1);
  const std::int64_t n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  kernels::active().matmul(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n);
  Tape* tape = active_tape();
  if (tape != nullptr && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto nb = b.node();
    auto no = out.node();
    tape->record({a, b}, out, [m, k, n, na, nb, no]() {
      double* da = na->requires_grad ? na->ensure_grad().data() : nullptr;
      double* db = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
      matmul_backward_slice(na->values.data(), nb->values.data(), no->grad.data(), m, k, n, da, db);
    });
  }
  return out;
}

Tensor matmul_batched(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3) {
    throw ShapeError("matmul_batched lhs must be rank 3, got " + shape_str(a.shape()));
  }
  if (b.rank() != 2 && b.rank() != 3) {
    throw ShapeError("matmul_batched rhs must be rank 2 or 3, got " + shape_str(b.shape()));
  }
  const std::int64_t batch = a.dim(0);
  const std::int64_t m = a.dim(1);
  const std::int64_t k = a.dim(2);
  const bool shared_rhs = b.rank() == 2;
  if (!shared_rhs && b.dim(0) != batch) {
    throw ShapeError("matmul_batched batch extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::int64_t kk = shared_rhs ? b.dim(0) : b.dim(1);
  const std::int64_t n = shared_rhs ? b.dim(1) : b.dim(2);
  if (kk != k) {
    throw ShapeError("matmul_batched inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({batch, m, n});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  const auto& kt = kernels::active();
  for (std::int64_t s = 0; s < batch; ++s) {
    kt.matmul(pa + s * m * k, shared_rhs ? pb : pb + s * k * n, po + s * m * n, m, k, n);
  }
  Tape* tape = active_tape();
  if (tape != nullptr && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto nb = b.node();
    auto no = out.node();
    tape->record({a, b}, out, [batch, m, k, n, shared_rhs, na, nb, no]() {
      double* da = na->requires_grad ? na->ensure_grad().data() : nullptr;
      double* db = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
      for (std::int64_t s = 0; s < batch; ++s) {
        matmul_backward_slice(na->values.data() + s * m * k,
                              shared_rhs ? nb->values.data() : nb->values.data() + s * k * n,
                              no->grad.data() + s * m * n, m, k, n,
                              da == nullptr ? nullptr : da + s * m * k,
                              db == nullptr ? nullptr : (shared_rhs ? db : db + s * k * n));
      }
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) {
    throw ShapeError("transpose_last2 requires rank >= 2, got " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  const std::size_t r = out_shape.size();
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  const std::int64_t m = a.dim(static_cast<int>(r) - 2);
  const std::int64_t n = a.dim(static_cast<int>(r) - 1);
  std::int64_t outer = 1;
  for (std::size_t ax = 0; ax + 2 < r; ++ax) outer *= a.shape()[ax];
  Tensor out = Tensor::zeros(out_shape);
  const double* pa = a.values().data();
  double* po = out.values_mut().data();
  for (std::int64_t s = 0; s < outer; ++s) {
    transpose_into(pa + s * m * n, m, n, po + s * m * n);
  }
  Tape* tape = active_tape();
  if (tape != nullptr && a.requires_grad()) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto no = out.node();
    tape->record({a}, out, [outer, m, n, na, no]() {
      if (!na->requires_grad) return;
      double* ga = na->ensure_grad().data();
      const double* g = no->grad.data();
      for (std::int64_t s = 0; s < outer; ++s) {
        const double* gs = g + s * m * n;
        double* gas = ga + s * m * n;
        // g is [n x m]; accumulate its transpose into ga ([m x n]).
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t j = 0; j < m; ++j) gas[j * n + i] += gs[i * m + j];
        }
      }
    });
  }
  return out;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError("dense requires rank-2 input and weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) {
    throw ShapeError("dense bias must be rank 1 of width " + std::to_string(w.dim(1)) +
                     ", got " + shape_str(bias.shape()));
  }
  return add(matmul(x, w), bias);
}

}  // namespace histonet::ops
