#include "histonet/attention.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "histonet/errors.hpp"
#include "histonet/ops.hpp"

namespace histonet::attention {

namespace {

void require_feature_map(const Tensor& f, const char* who) {
  if (f.rank() != 4) {
    throw ShapeError(std::string(who) + " expects a (batch, channels, H, W) input, got " +
                     shape_str(f.shape()));
  }
}

}  // namespace

ChannelAttentionResult channel_attention(const FeatureMap& f, const ChannelAttentionParams& p) {
  require_feature_map(f, "channel_attention");
  const std::int64_t c = f.dim(1);
  if (p.reduction_ratio < 1 || c % p.reduction_ratio != 0) {
    throw ShapeError("channel_attention: channels must be divisible by the reduction ratio");
  }
  const std::int64_t reduced = c / p.reduction_ratio;
  if (p.w0.rank() != 2 || p.w0.dim(0) != c || p.w0.dim(1) != reduced) {
    throw ShapeError("channel_attention: w0 must be (C, C/r), got " + shape_str(p.w0.shape()));
  }
  if (p.w1.rank() != 2 || p.w1.dim(0) != reduced || p.w1.dim(1) != c) {
    throw ShapeError("channel_attention: w1 must be (C/r, C), got " + shape_str(p.w1.shape()));
  }
  const auto mlp = [&](const Tensor& pooled) {
    return ops::matmul(ops::relu(ops::matmul(pooled, p.w0)), p.w1);
  };
  const Tensor avg = ops::global_pool(f, ops::PoolKind::avg);  // (b, C)
  const Tensor mx = ops::global_pool(f, ops::PoolKind::max);
  ChannelAttentionResult r;
  r.gate = ops::sigmoid(ops::add(mlp(avg), mlp(mx)));
  r.output = ops::mul(f, ops::reshape(r.gate, {f.dim(0), c, 1, 1}));
  return r;
}

SpatialAttentionResult spatial_attention(const FeatureMap& f, const SpatialAttentionParams& p) {
  require_feature_map(f, "spatial_attention");
  if (p.kernel.rank() != 4 || p.kernel.dim(0) != 1 || p.kernel.dim(1) != 2 ||
      p.kernel.dim(2) != 7 || p.kernel.dim(3) != 7) {
    throw ShapeError("spatial_attention: kernel must be (1, 2, 7, 7), got " +
                     shape_str(p.kernel.shape()));
  }
  const Tensor pooled = ops::concat(ops::channel_mean(f), ops::channel_max(f), 1);
  SpatialAttentionResult r;
  r.gate = ops::sigmoid(ops::conv2d(pooled, p.kernel, /*stride=*/1, /*padding=*/3));
  r.output = ops::mul(f, r.gate);
  return r;
}

FeatureMap cbam(const FeatureMap& f, const ChannelAttentionParams& cp,
                const SpatialAttentionParams& sp) {
  return spatial_attention(channel_attention(f, cp).output, sp).output;
}

SelfAttentionResult self_attention(const FeatureMap& f, const SelfAttentionParams& p) {
  require_feature_map(f, "self_attention");
  const std::int64_t b = f.dim(0);
  const std::int64_t c = f.dim(1);
  const std::int64_t n = f.dim(2) * f.dim(3);
  for (const Tensor* w : {&p.wq, &p.wk, &p.wv}) {
    if (w->rank() != 2 || w->dim(0) != c) {
      throw ShapeError("self_attention: projections must be (C, d), got " +
                       shape_str(w->shape()));
    }
  }
  const std::int64_t d = p.wq.dim(1);
  if (p.wk.dim(1) != d || p.wv.dim(1) != d) {
    throw ShapeError("self_attention: wq, wk, wv must share the projection width");
  }
  if (d != c) {
    throw ConfigError(
        "self_attention: projection width must equal the channel count (no output projection)");
  }
  // (b, C, H, W) -> tokens (b, N, C)
  const Tensor x = ops::transpose_last2(ops::reshape(f, {b, c, n}));
  const Tensor q = ops::matmul_batched(x, p.wq);
  const Tensor k = ops::matmul_batched(x, p.wk);
  const Tensor v = ops::matmul_batched(x, p.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  SelfAttentionResult r;
  r.attention =
      ops::softmax(ops::scale(ops::matmul_batched(q, ops::transpose_last2(k)), scale), 2);
  const Tensor mixed = ops::matmul_batched(r.attention, v);  // (b, N, d)
  r.output = ops::add(f, ops::reshape(ops::transpose_last2(mixed), f.shape()));
  return r;
}

namespace {

inline double pixel_or_zero(const double* plane, std::int64_t h, std::int64_t w, std::int64_t y,
                            std::int64_t x) {
  if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
  return plane[y * w + x];
}

}  // namespace

double bilinear_sample(const FeatureMap& f, double x, double y, std::int64_t b, std::int64_t c) {
  require_feature_map(f, "bilinear_sample");
  const std::int64_t h = f.dim(2);
  const std::int64_t w = f.dim(3);
  const double* plane = f.values().data() + ((b * f.dim(1) + c) * h) * w;
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  const auto y0 = static_cast<std::int64_t>(fy);
  const auto x0 = static_cast<std::int64_t>(fx);
  const double dy = y - fy;
  const double dx = x - fx;
  return (1.0 - dy) * (1.0 - dx) * pixel_or_zero(plane, h, w, y0, x0) +
         (1.0 - dy) * dx * pixel_or_zero(plane, h, w, y0, x0 + 1) +
         dy * (1.0 - dx) * pixel_or_zero(plane, h, w, y0 + 1, x0) +
         dy * dx * pixel_or_zero(plane, h, w, y0 + 1, x0 + 1);
}

void bilinear_sample_partials(const FeatureMap& f, double x, double y, std::int64_t b,
                              std::int64_t c, double& d_dx, double& d_dy) {
  require_feature_map(f, "bilinear_sample_partials");
  const std::int64_t h = f.dim(2);
  const std::int64_t w = f.dim(3);
  const double* plane = f.values().data() + ((b * f.dim(1) + c) * h) * w;
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  const auto y0 = static_cast<std::int64_t>(fy);
  const auto x0 = static_cast<std::int64_t>(fx);
  const double dy = y - fy;
  const double dx = x - fx;
  const double p00 = pixel_or_zero(plane, h, w, y0, x0);
  const double p01 = pixel_or_zero(plane, h, w, y0, x0 + 1);
  const double p10 = pixel_or_zero(plane, h, w, y0 + 1, x0);
  const double p11 = pixel_or_zero(plane, h, w, y0 + 1, x0 + 1);
  d_dx = (1.0 - dy) * (p01 - p00) + dy * (p11 - p10);
  d_dy = (1.0 - dx) * (p10 - p00) + dx * (p11 - p01);
}

FeatureMap deform_conv2d(const FeatureMap& f, const Tensor& offsets, const Tensor& value_kernel) {
  require_feature_map(f, "deform_conv2d");
  const std::int64_t b = f.dim(0);
  const std::int64_t c = f.dim(1);
  const std::int64_t h = f.dim(2);
  const std::int64_t w = f.dim(3);
  if (value_kernel.rank() != 4 || value_kernel.dim(1) != c) {
    throw ShapeError("deform_conv2d: value kernel must be (C_out, C_in, kh, kw), got " +
                     shape_str(value_kernel.shape()));
  }
  const std::int64_t cout = value_kernel.dim(0);
  const std::int64_t kh = value_kernel.dim(2);
  const std::int64_t kw = value_kernel.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ConfigError("deform_conv2d: kernel extents must be odd for same padding");
  }
  const std::int64_t taps = kh * kw;
  if (offsets.rank() != 4 || offsets.dim(0) != b || offsets.dim(1) != 2 * taps ||
      offsets.dim(2) != h || offsets.dim(3) != w) {
    throw ShapeError("deform_conv2d: offsets must be (batch, 2*kh*kw, H, W), got " +
                     shape_str(offsets.shape()));
  }
  const std::int64_t pad_y = (kh - 1) / 2;
  const std::int64_t pad_x = (kw - 1) / 2;

  // Sampled taps S[b, cin, t, y, x]; kept alive by the backward closure.
  auto sampled = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(b * c * taps * h * w), 0.0);
  const double* off = offsets.values().data();
  const double* wv = value_kernel.values().data();
  Tensor out = Tensor::zeros({b, cout, h, w});
  double* o = out.values_mut().data();

  const auto off_at = [&](std::int64_t bb, std::int64_t ch, std::int64_t y, std::int64_t x) {
    return off[((bb * 2 * taps + ch) * h + y) * w + x];
  };
  for (std::int64_t bb = 0; bb < b; ++bb) {
    for (std::int64_t cin = 0; cin < c; ++cin) {
      for (std::int64_t t = 0; t < taps; ++t) {
        const std::int64_t ky = t / kw;
        const std::int64_t kx = t % kw;
        double* srow =
            sampled->data() + (((bb * c + cin) * taps + t) * h) * w;
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t x = 0; x < w; ++x) {
            const double sx = static_cast<double>(x + kx - pad_x) + off_at(bb, 2 * t, y, x);
            const double sy = static_cast<double>(y + ky - pad_y) + off_at(bb, 2 * t + 1, y, x);
            srow[y * w + x] = bilinear_sample(f, sx, sy, bb, cin);
          }
        }
      }
    }
  }
  // out[b, co, y, x] = sum_{cin, t} value_kernel[co, cin, t] * S[b, cin, t, y, x]
  for (std::int64_t bb = 0; bb < b; ++bb) {
    for (std::int64_t co = 0; co < cout; ++co) {
      double* orow = o + ((bb * cout + co) * h) * w;
      for (std::int64_t cin = 0; cin < c; ++cin) {
        for (std::int64_t t = 0; t < taps; ++t) {
          const double wk = wv[(co * c + cin) * taps + t];
          if (wk == 0.0) continue;
          const double* srow = sampled->data() + (((bb * c + cin) * taps + t) * h) * w;
          for (std::int64_t i = 0; i < h * w; ++i) orow[i] += wk * srow[i];
        }
      }
    }
  }

  Tape* tape = active_tape();
  const bool track =
      tape != nullptr && (f.requires_grad() || offsets.requires_grad() ||
                          value_kernel.requires_grad());
  if (track) {
    out.set_requires_grad(true);
    TensorData* nf = f.node();
    TensorData* noff = offsets.node();
    TensorData* nw = value_kernel.node();
    TensorData* no = out.node();
    tape->record(
        {f, offsets, value_kernel}, out,
        [nf, noff, nw, no, sampled, b, c, cout, h, w, kh, kw, taps, pad_y, pad_x]() {
          const double* g = no->grad.data();
          const double* wv2 = nw->values.data();
          const double* off2 = noff->values.data();
          // dS[b, cin, t, y, x] = sum_co g[b, co, y, x] * w[co, cin, t]
          std::vector<double> ds(sampled->size(), 0.0);
          for (std::int64_t bb = 0; bb < b; ++bb) {
            for (std::int64_t co = 0; co < cout; ++co) {
              const double* grow = g + ((bb * cout + co) * h) * w;
              for (std::int64_t cin = 0; cin < c; ++cin) {
                for (std::int64_t t = 0; t < taps; ++t) {
                  const double wk = wv2[(co * c + cin) * taps + t];
                  if (wk == 0.0) continue;
                  double* drow = ds.data() + (((bb * c + cin) * taps + t) * h) * w;
                  for (std::int64_t i = 0; i < h * w; ++i) drow[i] += wk * grow[i];
                }
              }
            }
          }
          if (nw->requires_grad) {
            auto& gw = nw->ensure_grad();
            // dW[co, cin, t] = sum_{b, y, x} g[b, co, y, x] * S[b, cin, t, y, x]
            for (std::int64_t bb = 0; bb < b; ++bb) {
              for (std::int64_t co = 0; co < cout; ++co) {
                const double* grow = g + ((bb * cout + co) * h) * w;
                for (std::int64_t cin = 0; cin < c; ++cin) {
                  for (std::int64_t t = 0; t < taps; ++t) {
                    const double* srow =
                        sampled->data() + (((bb * c + cin) * taps + t) * h) * w;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < h * w; ++i) acc += grow[i] * srow[i];
                    gw[static_cast<std::size_t>((co * c + cin) * taps + t)] += acc;
                  }
                }
              }
            }
          }
          const bool want_f = nf->requires_grad;
          const bool want_off = noff->requires_grad;
          if (!want_f && !want_off) return;
          double* gf = want_f ? nf->ensure_grad().data() : nullptr;
          double* goff = want_off ? noff->ensure_grad().data() : nullptr;
          const double* fv = nf->values.data();
          for (std::int64_t bb = 0; bb < b; ++bb) {
            for (std::int64_t cin = 0; cin < c; ++cin) {
              const double* plane = fv + ((bb * c + cin) * h) * w;
              double* gplane = want_f ? gf + ((bb * c + cin) * h) * w : nullptr;
              for (std::int64_t t = 0; t < taps; ++t) {
                const std::int64_t ky = t / kw;
                const std::int64_t kx = t % kw;
                const double* drow = ds.data() + (((bb * c + cin) * taps + t) * h) * w;
                for (std::int64_t y = 0; y < h; ++y) {
                  for (std::int64_t x = 0; x < w; ++x) {
                    const double gs = drow[y * w + x];
                    if (gs == 0.0) continue;
                    const double sx =
                        static_cast<double>(x + kx - pad_x) +
                        off2[((bb * 2 * taps + 2 * t) * h + y) * w + x];
                    const double sy =
                        static_cast<double>(y + ky - pad_y) +
                        off2[((bb * 2 * taps + 2 * t + 1) * h + y) * w + x];
                    const double fy = std::floor(sy);
                    const double fx = std::floor(sx);
                    const auto y0 = static_cast<std::int64_t>(fy);
                    const auto x0 = static_cast<std::int64_t>(fx);
                    const double ry = sy - fy;
                    const double rx = sx - fx;
                    const double p00 = pixel_or_zero(plane, h, w, y0, x0);
                    const double p01 = pixel_or_zero(plane, h, w, y0, x0 + 1);
                    const double p10 = pixel_or_zero(plane, h, w, y0 + 1, x0);
                    const double p11 = pixel_or_zero(plane, h, w, y0 + 1, x0 + 1);
                    if (want_f) {
                      const auto bump = [&](std::int64_t yy, std::int64_t xx, double wgt) {
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w || wgt == 0.0) return;
                        gplane[yy * w + xx] += gs * wgt;
                      };
                      bump(y0, x0, (1.0 - ry) * (1.0 - rx));
                      bump(y0, x0 + 1, (1.0 - ry) * rx);
                      bump(y0 + 1, x0, ry * (1.0 - rx));
                      bump(y0 + 1, x0 + 1, ry * rx);
                    }
                    if (want_off) {
                      const double dvdx = (1.0 - ry) * (p01 - p00) + ry * (p11 - p10);
                      const double dvdy = (1.0 - rx) * (p10 - p00) + rx * (p11 - p01);
                      goff[((bb * 2 * taps + 2 * t) * h + y) * w + x] += gs * dvdx;
                      goff[((bb * 2 * taps + 2 * t + 1) * h + y) * w + x] += gs * dvdy;
                    }
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

FeatureMap deformable_attention(const FeatureMap& f, const DeformableAttentionParams& p) {
  require_feature_map(f, "deformable_attention");
  const std::int64_t c = f.dim(1);
  if (p.value_kernel.rank() != 4 || p.value_kernel.dim(0) != c || p.value_kernel.dim(1) != c) {
    throw ShapeError("deformable_attention: value kernel must be (C, C, kh, kw), got " +
                     shape_str(p.value_kernel.shape()));
  }
  if (p.value_kernel.dim(2) % 2 == 0 || p.value_kernel.dim(3) % 2 == 0) {
    throw ConfigError("deformable_attention: kernel extents must be odd for same padding");
  }
  const std::int64_t taps = p.value_kernel.dim(2) * p.value_kernel.dim(3);
  if (p.offset_kernel.rank() != 4 || p.offset_kernel.dim(0) != 2 * taps ||
      p.offset_kernel.dim(1) != c || p.offset_kernel.dim(2) != 3 || p.offset_kernel.dim(3) != 3) {
    throw ShapeError("deformable_attention: offset kernel must be (2*kh*kw, C, 3, 3), got " +
                     shape_str(p.offset_kernel.shape()));
  }
  const Tensor offsets = ops::conv2d(f, p.offset_kernel, /*stride=*/1, /*padding=*/1);
  return deform_conv2d(f, offsets, p.value_kernel);
}

}  // namespace histonet::attention
