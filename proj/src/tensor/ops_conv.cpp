#include <algorithm>
#include <cstdint>
#include <cstring>
#include <memory>
#include <vector>

#include "histonet/errors.hpp"
#include "histonet/kernels.hpp"
#include "histonet/ops.hpp"
#include "histonet/tensor.hpp"

namespace histonet::ops {

namespace {

// Copies the `cig` input planes that feed one (batch, group) pair into a
// zero-filled padded buffer [cig, h+2p, w+2p].
void pad_group(const double* x, std::int64_t cig, std::int64_t h, std::int64_t w, std::int64_t p,
               double* xpad) {
  const std::int64_t hp = h + 2 * p;
  const std::int64_t wp = w + 2 * p;
  std::fill_n(xpad, cig * hp * wp, 0.0);
  for (std::int64_t c = 0; c < cig; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      std::copy_n(x + (c * h + y) * w, w, xpad + c * hp * wp + (y + p) * wp + p);
    }
  }
}

// Adds the interior of the padded gradient buffer back onto the input grad.
void unpad_accumulate(const double* dxpad, std::int64_t cig, std::int64_t h, std::int64_t w,
                      std::int64_t p, double* dx) {
  const std::int64_t hp = h + 2 * p;
  const std::int64_t wp = w + 2 * p;
  for (std::int64_t c = 0; c < cig; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      const double* src = dxpad + c * hp * wp + (y + p) * wp + p;
      double* dst = dx + (c * h + y) * w;
      for (std::int64_t xcol = 0; xcol < w; ++xcol) dst[xcol] += src[xcol];
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding, int groups) {
  if (x.rank() != 4) throw ShapeError("conv2d input must be rank 4, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
  if (groups < 1) throw ConfigError("conv2d groups must be >= 1");
  const std::int64_t batch = x.dim(0);
  const std::int64_t ci = x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t wd = x.dim(3);
  const std::int64_t co = w.dim(0);
  const std::int64_t cig = w.dim(1);
  const std::int64_t kh = w.dim(2);
  const std::int64_t kw = w.dim(3);
  if (ci % groups != 0 || co % groups != 0) {
    throw ShapeError("conv2d channels must divide groups: in=" + std::to_string(ci) +
                     " out=" + std::to_string(co) + " groups=" + std::to_string(groups));
  }
  if (cig != ci / groups) {
    throw ShapeError("conv2d weight expects " + std::to_string(ci / groups) +
                     " channels per group, got " + std::to_string(cig));
  }
  const std::int64_t hp = h + 2 * padding;
  const std::int64_t wp = wd + 2 * padding;
  if (hp < kh || wp < kw) {
    throw ShapeError("conv2d kernel " + shape_str(w.shape()) + " exceeds padded input " +
                     shape_str({batch, ci, hp, wp}));
  }
  const std::int64_t oh = (hp - kh) / stride + 1;
  const std::int64_t ow = (wp - kw) / stride + 1;
  const std::int64_t cog = co / groups;

  Tensor out = Tensor::zeros({batch, co, oh, ow});
  const double* px = x.values().data();
  const double* pw = w.values().data();
  double* po = out.values_mut().data();
  const auto& kt = kernels::active();
  std::vector<double> xpad(static_cast<std::size_t>(cig * hp * wp));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t g = 0; g < groups; ++g) {
      pad_group(px + ((b * ci + g * cig) * h) * wd, cig, h, wd, padding, xpad.data());
      for (std::int64_t ocl = 0; ocl < cog; ++ocl) {
        const std::int64_t oc = g * cog + ocl;
        const double* woc = pw + oc * cig * kh * kw;
        for (std::int64_t row = 0; row < oh; ++row) {
          kt.conv_row(xpad.data(), woc, po + ((b * co + oc) * oh + row) * ow,
                      static_cast<std::size_t>(cig), static_cast<std::size_t>(hp),
                      static_cast<std::size_t>(wp), static_cast<std::size_t>(kh),
                      static_cast<std::size_t>(kw), static_cast<std::size_t>(row),
                      static_cast<std::size_t>(ow), static_cast<std::size_t>(stride));
        }
      }
    }
  }

  Tape* tape = active_tape();
  if (tape != nullptr && (x.requires_grad() || w.requires_grad())) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto nw = w.node();
    auto no = out.node();
    const std::int64_t s = stride;
    const std::int64_t p = padding;
    tape->record({x, w}, out, [batch, ci, h, wd, co, cig, kh, kw, hp, wp, oh, ow, cog, s, p,
                               groups, nx, nw, no]() {
      const bool need_dx = nx->requires_grad;
      const bool need_dw = nw->requires_grad;
      if (!need_dx && !need_dw) return;
      const double* g = no->grad.data();
      const double* pw2 = nw->values.data();
      const double* px2 = nx->values.data();
      double* dx = need_dx ? nx->ensure_grad().data() : nullptr;
      double* dw = need_dw ? nw->ensure_grad().data() : nullptr;
      std::vector<double> xpad2(static_cast<std::size_t>(cig * hp * wp));
      std::vector<double> dxpad(need_dx ? static_cast<std::size_t>(cig * hp * wp) : 0);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t grp = 0; grp < groups; ++grp) {
          if (need_dw) {
            pad_group(px2 + ((b * ci + grp * cig) * h) * wd, cig, h, wd, p, xpad2.data());
          }
          if (need_dx) std::fill(dxpad.begin(), dxpad.end(), 0.0);
          for (std::int64_t ocl = 0; ocl < cog; ++ocl) {
            const std::int64_t oc = grp * cog + ocl;
            const double* woc = pw2 + oc * cig * kh * kw;
            double* dwoc = need_dw ? dw + oc * cig * kh * kw : nullptr;
            for (std::int64_t row = 0; row < oh; ++row) {
              for (std::int64_t col = 0; col < ow; ++col) {
                const double gv = g[((b * co + oc) * oh + row) * ow + col];
                const std::int64_t y0 = row * s;
                const std::int64_t x0 = col * s;
                for (std::int64_t c = 0; c < cig; ++c) {
                  for (std::int64_t i = 0; i < kh; ++i) {
                    const std::int64_t prow = c * hp * wp + (y0 + i) * wp + x0;
                    const std::int64_t wrow = c * kh * kw + i * kw;
                    for (std::int64_t j = 0; j < kw; ++j) {
                      if (need_dx) dxpad[static_cast<std::size_t>(prow + j)] += gv * woc[wrow + j];
                      if (need_dw) dwoc[wrow + j] += gv * xpad2[static_cast<std::size_t>(prow + j)];
                    }
                  }
                }
              }
            }
          }
          if (need_dx) {
            unpad_accumulate(dxpad.data(), cig, h, wd, p, dx + ((b * ci + grp * cig) * h) * wd);
          }
        }
      }
    });
  }
  return out;
}

Tensor pool2d(const Tensor& x, PoolKind kind, int kh, int kw, int stride) {
  if (x.rank() != 4) throw ShapeError("pool2d input must be rank 4, got " + shape_str(x.shape()));
  if (kh < 1 || kw < 1) throw ConfigError("pool2d window must be >= 1");
  if (stride < 1) throw ConfigError("pool2d stride must be >= 1");
  const std::int64_t batch = x.dim(0);
  const std::int64_t ch = x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t w = x.dim(3);
  if (h < kh || w < kw) {
    throw ShapeError("pool2d window " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds input " + shape_str(x.shape()));
  }
  const std::int64_t oh = (h - kh) / stride + 1;
  const std::int64_t ow = (w - kw) / stride + 1;
  Tensor out = Tensor::zeros({batch, ch, oh, ow});
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (kind == PoolKind::max) argmax->resize(static_cast<std::size_t>(out.numel()));
  const double inv_area = 1.0 / static_cast<double>(kh * kw);
  for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
    const double* plane = px + bc * h * w;
    for (std::int64_t row = 0; row < oh; ++row) {
      for (std::int64_t col = 0; col < ow; ++col) {
        const std::int64_t y0 = row * stride;
        const std::int64_t x0 = col * stride;
        const std::int64_t oidx = (bc * oh + row) * ow + col;
        if (kind == PoolKind::avg) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) acc += plane[(y0 + i) * w + (x0 + j)];
          }
          po[oidx] = acc * inv_area;
        } else {
          std::int64_t best = (y0 * w + x0);
          double bv = plane[best];
          for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t idx = (y0 + i) * w + (x0 + j);
              if (plane[idx] > bv) {  // ties keep the first element in scan order
                bv = plane[idx];
                best = idx;
              }
            }
          }
          po[oidx] = bv;
          (*argmax)[static_cast<std::size_t>(oidx)] = bc * h * w + best;
        }
      }
    }
  }
  Tape* tape = active_tape();
  if (tape != nullptr && x.requires_grad()) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto no = out.node();
    const std::int64_t s = stride;
    const std::int64_t kh64 = kh;
    const std::int64_t kw64 = kw;
    tape->record({x}, out, [kind, argmax, batch, ch, h, w, oh, ow, kh64, kw64, s, inv_area, nx,
                            no]() {
      if (!nx->requires_grad) return;
      const double* g = no->grad.data();
      double* gx = nx->ensure_grad().data();
      if (kind == PoolKind::max) {
        for (std::size_t i = 0; i < argmax->size(); ++i) {
          gx[static_cast<std::size_t>((*argmax)[i])] += g[i];
        }
        return;
      }
      for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
        for (std::int64_t row = 0; row < oh; ++row) {
          for (std::int64_t col = 0; col < ow; ++col) {
            const double gv = g[(bc * oh + row) * ow + col] * inv_area;
            const std::int64_t y0 = row * s;
            const std::int64_t x0 = col * s;
            for (std::int64_t i = 0; i < kh64; ++i) {
              for (std::int64_t j = 0; j < kw64; ++j) {
                gx[bc * h * w + (y0 + i) * w + (x0 + j)] += gv;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor global_pool(const Tensor& x, PoolKind kind) {
  if (x.rank() != 4) {
    throw ShapeError("global_pool input must be rank 4, got " + shape_str(x.shape()));
  }
  const std::int64_t batch = x.dim(0);
  const std::int64_t ch = x.dim(1);
  const std::int64_t area = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({batch, ch});
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (kind == PoolKind::max) argmax->resize(static_cast<std::size_t>(batch * ch));
  for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
    const double* plane = px + bc * area;
    if (kind == PoolKind::avg) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < area; ++i) acc += plane[i];
      po[bc] = acc / static_cast<double>(area);
    } else {
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < area; ++i) {
        if (plane[i] > plane[best]) best = i;
      }
      po[bc] = plane[best];
      (*argmax)[static_cast<std::size_t>(bc)] = bc * area + best;
    }
  }
  Tape* tape = active_tape();
  if (tape != nullptr && x.requires_grad()) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto no = out.node();
    tape->record({x}, out, [kind, argmax, batch, ch, area, nx, no]() {
      if (!nx->requires_grad) return;
      const double* g = no->grad.data();
      double* gx = nx->ensure_grad().data();
      if (kind == PoolKind::max) {
        for (std::size_t i = 0; i < argmax->size(); ++i) {
          gx[static_cast<std::size_t>((*argmax)[i])] += g[i];
        }
        return;
      }
      const double inv = 1.0 / static_cast<double>(area);
      for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
        const double gv = g[bc] * inv;
        for (std::int64_t i = 0; i < area; ++i) gx[bc * area + i] += gv;
      }
    });
  }
  return out;
}

namespace {

Tensor channel_reduce(const Tensor& x, bool take_max) {
  if (x.rank() != 4) {
    throw ShapeError("channel reduction input must be rank 4, got " + shape_str(x.shape()));
  }
  const std::int64_t batch = x.dim(0);
  const std::int64_t ch = x.dim(1);
  const std::int64_t area = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({batch, 1, x.dim(2), x.dim(3)});
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (take_max) argmax->resize(static_cast<std::size_t>(batch * area));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < area; ++i) {
      const std::int64_t base = b * ch * area + i;
      if (take_max) {
        std::int64_t best = 0;
        double bv = px[base];
        for (std::int64_t c = 1; c < ch; ++c) {
          const double v = px[base + c * area];
          if (v > bv) {  // ties keep the lowest channel index
            bv = v;
            best = c;
          }
        }
        po[b * area + i] = bv;
        (*argmax)[static_cast<std::size_t>(b * area + i)] = base + best * area;
      } else {
        double acc = 0.0;
        for (std::int64_t c = 0; c < ch; ++c) acc += px[base + c * area];
        po[b * area + i] = acc / static_cast<double>(ch);
      }
    }
  }
  Tape* tape = active_tape();
  if (tape != nullptr && x.requires_grad()) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto no = out.node();
    tape->record({x}, out, [take_max, argmax, batch, ch, area, nx, no]() {
      if (!nx->requires_grad) return;
      const double* g = no->grad.data();
      double* gx = nx->ensure_grad().data();
      if (take_max) {
        for (std::size_t i = 0; i < argmax->size(); ++i) {
          gx[static_cast<std::size_t>((*argmax)[i])] += g[i];
        }
        return;
      }
      const double inv = 1.0 / static_cast<double>(ch);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t i = 0; i < area; ++i) {
          const double gv = g[b * area + i] * inv;
          for (std::int64_t c = 0; c < ch; ++c) gx[b * ch * area + c * area + i] += gv;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor channel_mean(const Tensor& x) { return channel_reduce(x, false); }
Tensor channel_max(const Tensor& x) { return channel_reduce(x, true); }

}  // namespace histonet::ops
