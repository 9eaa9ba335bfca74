#pragma once

#include <cstdint>
#include <functional>

#include "histonet/tensor.hpp"

namespace histonet::ops {

enum class PoolKind { avg, max };

// Trailing-dimension broadcast rule: shapes are aligned at their last axis;
// each aligned pair of extents must be equal or contain a 1, which is
// stretched. Incompatible extents throw BroadcastError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);

// C[m x n] = A[m x k] * B[k x n]; gradients dA = dC*B^T, dB = A^T*dC.
Tensor matmul(const Tensor& a, const Tensor& b);
// A is [B,m,k]; b is [B,k,n] or a shared [k,n] (gradient then sums over batch).
Tensor matmul_batched(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor sum(const Tensor& a);  // scalar result

// x: (batch, in_ch, H, W); w: (out_ch, in_ch/groups, kh, kw). Output spatial
// extent is floor((H + 2*padding - kh)/stride) + 1 and must be positive.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding, int groups = 1);
Tensor pool2d(const Tensor& x, PoolKind kind, int kh, int kw, int stride);
Tensor global_pool(const Tensor& x, PoolKind kind);  // -> (batch, channels)
Tensor channel_mean(const Tensor& x);                // -> (batch, 1, H, W)
Tensor channel_max(const Tensor& x);

// Max-subtracted along `axis`; output sums to 1 along that axis.
Tensor softmax(const Tensor& x, int axis);

// matmul(x, w) + bias, bias broadcast over rows. Bitwise equal to that
// composition by construction.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias);

// Inverted dropout: each element zeroed with probability p and survivors
// scaled by 1/(1-p); identity in eval mode; the mask is a pure function of
// the seed.
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

// Replays the active tape from a scalar root.
void backward(const Tensor& root);

// Central finite differences (f(x+h*e_i) - f(x-h*e_i)) / (2h), elementwise.
// The oracle side of every gradient check; evaluates f only, never the tape.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h);

}  // namespace histonet::ops
