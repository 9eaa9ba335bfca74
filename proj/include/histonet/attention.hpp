#pragma once

#include <cstdint>

#include "histonet/tensor.hpp"

namespace histonet::attention {

// Channel gate: per-channel sigmoid weights from a shared bias-free MLP
// (w0, ReLU, w1) applied to both the average- and max-pooled descriptors.
struct ChannelAttentionParams {
  Tensor w0;  // (C, C/r)
  Tensor w1;  // (C/r, C)
  int reduction_ratio = 4;
};

struct ChannelAttentionResult {
  Tensor gate;    // (batch, C), entries in (0,1)
  Tensor output;  // gate broadcast over HxW, multiplied into the input
};

ChannelAttentionResult channel_attention(const FeatureMap& f, const ChannelAttentionParams& p);

// Spatial gate: per-position sigmoid weights from a 7x7 convolution (padding
// 3) over the concatenated channel-mean and channel-max maps.
struct SpatialAttentionParams {
  Tensor kernel;  // (1, 2, 7, 7)
};

struct SpatialAttentionResult {
  Tensor gate;    // (batch, 1, H, W), entries in (0,1)
  Tensor output;  // gate broadcast over channels, multiplied into the input
};

SpatialAttentionResult spatial_attention(const FeatureMap& f, const SpatialAttentionParams& p);

// Channel gate first, then spatial gate on its output.
FeatureMap cbam(const FeatureMap& f, const ChannelAttentionParams& cp,
                const SpatialAttentionParams& sp);

// Scaled dot-product attention over the H*W spatial tokens with a residual
// connection. Projections map token dimension C to d; d must equal C (there
// is no output projection).
struct SelfAttentionParams {
  Tensor wq, wk, wv;  // (C, d)
};

struct SelfAttentionResult {
  Tensor attention;  // (batch, N, N), rows sum to 1
  Tensor output;     // input + reshaped attention-weighted values
};

SelfAttentionResult self_attention(const FeatureMap& f, const SelfAttentionParams& p);

// Value of f at real coordinates (x horizontal, y vertical) by bilinear
// interpolation of the four integer neighbors; out-of-bounds taps read 0.
double bilinear_sample(const FeatureMap& f, double x, double y, std::int64_t b, std::int64_t c);

// Partial derivatives of bilinear_sample w.r.t. x and y (defined almost
// everywhere; at integer coordinates the right-sided cell is used).
void bilinear_sample_partials(const FeatureMap& f, double x, double y, std::int64_t b,
                              std::int64_t c, double& d_dx, double& d_dy);

// Convolution whose taps are displaced by learned per-position offsets.
struct DeformableAttentionParams {
  Tensor offset_kernel;  // (2*kh*kw, C, 3, 3) -> per-tap (dx, dy) planes
  Tensor value_kernel;   // (C, C, kh, kw), kh and kw odd
};

// value_kernel evaluated at (base grid + offsets) via bilinear sampling with
// zero padding out of bounds; offsets come from a same-padding 3x3
// convolution of f with offset_kernel. All offsets zero reduces exactly to
// conv2d(f, value_kernel, stride 1, same padding).
FeatureMap deformable_attention(const FeatureMap& f, const DeformableAttentionParams& p);

// The fused sampling op underlying deformable_attention, exposed for tests:
// offsets is (batch, 2*kh*kw, H, W) with channel 2t = dx, 2t+1 = dy for tap t;
// value_kernel is (C_out, C_in, kh, kw) with odd extents.
FeatureMap deform_conv2d(const FeatureMap& f, const Tensor& offsets, const Tensor& value_kernel);

}  // namespace histonet::attention
