#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "histonet/errors.hpp"
#include "histonet/kernels.hpp"
#include "histonet/ops.hpp"
#include "histonet/rng.hpp"
#include "histonet/tensor.hpp"

namespace histonet::ops {

namespace {

// Element strides of an operand viewed through the broadcast output shape;
// stretched axes get stride 0 so the same source element is revisited.
struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> element_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 0);
  std::int64_t acc = 1;
  for (int ax = static_cast<int>(shape.size()) - 1; ax >= 0; --ax) {
    strides[static_cast<std::size_t>(ax)] = acc;
    acc *= shape[static_cast<std::size_t>(ax)];
  }
  return strides;
}

// Strides of `shape` aligned to the trailing axes of `out`; 0 where stretched.
std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const std::vector<std::int64_t> own = element_strides(shape);
  std::vector<std::int64_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t ax = 0; ax < shape.size(); ++ax) {
    strides[offset + ax] = (shape[ax] == 1 && out[offset + ax] != 1) ? 0 : own[ax];
  }
  return strides;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shapes(a, b);
  plan.stride_a = broadcast_strides(a, plan.out);
  plan.stride_b = broadcast_strides(b, plan.out);
  return plan;
}

// Visits every output element in row-major order; f(out_index, a_off, b_off).
template <class F>
void for_each(const BroadcastPlan& plan, F&& f) {
  const std::int64_t n = shape_numel(plan.out);
  if (n == 0) return;
  const int rank = static_cast<int>(plan.out.size());
  if (rank == 0) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> coord(static_cast<std::size_t>(rank), 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t idx = 0;;) {
    f(idx, oa, ob);
    if (++idx == n) break;
    for (int ax = rank - 1; ax >= 0; --ax) {
      const auto uax = static_cast<std::size_t>(ax);
      ++coord[uax];
      oa += plan.stride_a[uax];
      ob += plan.stride_b[uax];
      if (coord[uax] < plan.out[uax]) break;
      coord[uax] = 0;
      oa -= plan.stride_a[uax] * plan.out[uax];
      ob -= plan.stride_b[uax] * plan.out[uax];
    }
  }
}

bool tape_wants(const Tensor& a) { return active_tape() != nullptr && a.requires_grad(); }

enum class BinKind { add, sub, mul };

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b) {
  const BroadcastPlan plan = make_plan(a.shape(), b.shape());
  Tensor out = Tensor::zeros(plan.out);
  const bool same = a.shape() == b.shape();
  const auto& ka = kernels::active();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  const auto n = static_cast<std::size_t>(out.numel());
  if (same) {
    switch (kind) {
      case BinKind::add: ka.add(pa, pb, po, n); break;
      case BinKind::sub: ka.sub(pa, pb, po, n); break;
      case BinKind::mul: ka.mul(pa, pb, po, n); break;
    }
  } else {
    switch (kind) {
      case BinKind::add:
        for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = pa[ia] + pb[ib]; });
        break;
      case BinKind::sub:
        for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = pa[ia] - pb[ib]; });
        break;
      case BinKind::mul:
        for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = pa[ia] * pb[ib]; });
        break;
    }
  }
  Tape* tape = active_tape();
  if (tape != nullptr && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto nb = b.node();
    auto no = out.node();
    tape->record({a, b}, out, [kind, plan, na, nb, no]() {
      const std::vector<double>& g = no->grad;
      if (na->requires_grad) {
        std::vector<double>& ga = na->ensure_grad();
        switch (kind) {
          case BinKind::add:
          case BinKind::sub:
            for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t) { ga[static_cast<std::size_t>(ia)] += g[static_cast<std::size_t>(i)]; });
            break;
          case BinKind::mul: {
            const double* pb2 = nb->values.data();
            for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
              ga[static_cast<std::size_t>(ia)] += g[static_cast<std::size_t>(i)] * pb2[ib];
            });
            break;
          }
        }
      }
      if (nb->requires_grad) {
        std::vector<double>& gb = nb->ensure_grad();
        switch (kind) {
          case BinKind::add:
            for_each(plan, [&](std::int64_t i, std::int64_t, std::int64_t ib) { gb[static_cast<std::size_t>(ib)] += g[static_cast<std::size_t>(i)]; });
            break;
          case BinKind::sub:
            for_each(plan, [&](std::int64_t i, std::int64_t, std::int64_t ib) { gb[static_cast<std::size_t>(ib)] -= g[static_cast<std::size_t>(i)]; });
            break;
          case BinKind::mul: {
            const double* pa2 = na->values.data();
            for_each(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
              gb[static_cast<std::size_t>(ib)] += g[static_cast<std::size_t>(i)] * pa2[ia];
            });
            break;
          }
        }
      }
    });
  }
  return out;
}

enum class UnKind { sigmoid, relu, tanh };

Tensor unary_op(UnKind kind, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.values().data();
  double* po = out.values_mut().data();
  const auto n = static_cast<std::size_t>(a.numel());
  switch (kind) {
    case UnKind::sigmoid:
      // exp of the negative magnitude only, so exp() never overflows; the
      // select picks 1/(1+e) or e/(1+e) by sign.
      for (std::size_t i = 0; i < n; ++i) {
        const double x = pa[i];
        const double e = std::exp(-std::fabs(x));
        po[i] = x >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      }
      break;
    case UnKind::relu: kernels::active().relu(pa, po, n); break;
    case UnKind::tanh:
      for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
      break;
  }
  Tape* tape = active_tape();
  if (tape != nullptr && a.requires_grad()) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto no = out.node();
    tape->record({a}, out, [kind, na, no]() {
      if (!na->requires_grad) return;
      const std::vector<double>& g = no->grad;
      std::vector<double>& ga = na->ensure_grad();
      const std::size_t n2 = g.size();
      switch (kind) {
        case UnKind::sigmoid:
          for (std::size_t i = 0; i < n2; ++i) {
            const double y = no->values[i];
            ga[i] += g[i] * y * (1.0 - y);
          }
          break;
        case UnKind::relu:
          for (std::size_t i = 0; i < n2; ++i) {
            if (na->values[i] > 0.0) ga[i] += g[i];
          }
          break;
        case UnKind::tanh:
          for (std::size_t i = 0; i < n2; ++i) {
            const double y = no->values[i];
            ga[i] += g[i] * (1.0 - y * y);
          }
          break;
      }
    });
  }
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw BroadcastError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::mul, a, b); }

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  kernels::active().scale(a.values().data(), s, out.values_mut().data(),
                          static_cast<std::size_t>(a.numel()));
  if (tape_wants(a)) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto no = out.node();
    active_tape()->record({a}, out, [s, na, no]() {
      if (!na->requires_grad) return;
      std::vector<double>& ga = na->ensure_grad();
      kernels::active().axpy(s, no->grad.data(), ga.data(), ga.size());
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) { return unary_op(UnKind::sigmoid, a); }
Tensor relu(const Tensor& a) { return unary_op(UnKind::relu, a); }
Tensor tanh(const Tensor& a) { return unary_op(UnKind::tanh, a); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  Tensor out = Tensor::from_values(shape, {a.values().begin(), a.values().end()});
  if (tape_wants(a)) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto no = out.node();
    active_tape()->record({a}, out, [na, no]() {
      if (!na->requires_grad) return;
      std::vector<double>& ga = na->ensure_grad();
      kernels::active().axpy(1.0, no->grad.data(), ga.data(), ga.size());
    });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank()) {
    throw ShapeError("concat requires equal ranks, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int rank = static_cast<int>(a.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  for (int ax = 0; ax < rank; ++ax) {
    if (ax != axis && a.dim(ax) != b.dim(ax)) {
      throw ShapeError("concat shapes differ off-axis: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  Tensor out = Tensor::zeros(out_shape);

  std::int64_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= a.dim(ax);
  std::int64_t inner = 1;
  for (int ax = axis + 1; ax < rank; ++ax) inner *= a.dim(ax);
  const std::int64_t block_a = a.dim(axis) * inner;
  const std::int64_t block_b = b.dim(axis) * inner;
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(pa + o * block_a, block_a, po + o * (block_a + block_b));
    std::copy_n(pb + o * block_b, block_b, po + o * (block_a + block_b) + block_a);
  }

  Tape* tape = active_tape();
  if (tape != nullptr && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto nb = b.node();
    auto no = out.node();
    tape->record({a, b}, out, [outer, block_a, block_b, na, nb, no]() {
      const double* g = no->grad.data();
      if (na->requires_grad) {
        double* ga = na->ensure_grad().data();
        for (std::int64_t o = 0; o < outer; ++o) {
          kernels::active().axpy(1.0, g + o * (block_a + block_b), ga + o * block_a,
                                 static_cast<std::size_t>(block_a));
        }
      }
      if (nb->requires_grad) {
        double* gb = nb->ensure_grad().data();
        for (std::int64_t o = 0; o < outer; ++o) {
          kernels::active().axpy(1.0, g + o * (block_a + block_b) + block_a, gb + o * block_b,
                                 static_cast<std::size_t>(block_b));
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (tape_wants(a)) {
    out.set_requires_grad(true);
    auto na = a.node();
    auto no = out.node();
    active_tape()->record({a}, out, [na, no]() {
      if (!na->requires_grad) return;
      const double g = no->grad[0];
      for (double& v : na->ensure_grad()) v += g;
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax requires rank >= 1");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax axis out of range");
  const std::int64_t n = x.dim(axis);
  std::int64_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= x.dim(ax);
  std::int64_t inner = 1;
  for (int ax = axis + 1; ax < rank; ++ax) inner *= x.dim(ax);

  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      double mx = px[base];
      for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, px[base + k * inner]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < n; ++k) {
        const double e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        denom += e;
      }
      for (std::int64_t k = 0; k < n; ++k) po[base + k * inner] /= denom;
    }
  }

  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto no = out.node();
    active_tape()->record({x}, out, [outer, inner, n, nx, no]() {
      if (!nx->requires_grad) return;
      const double* g = no->grad.data();
      const double* y = no->values.data();
      double* gx = nx->ensure_grad().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::int64_t k = 0; k < n; ++k) {
            const std::int64_t i = base + k * inner;
            dot += g[i] * y[i];
          }
          for (std::int64_t k = 0; k < n; ++k) {
            const std::int64_t i = base + k * inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1)");
  }
  if (!training || p == 0.0) return x;
  const auto n = static_cast<std::size_t>(x.numel());
  auto mask = std::make_shared<std::vector<double>>(n, 0.0);
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) {
    (*mask)[i] = rng.uniform01() < p ? 0.0 : keep_scale;
  }
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[i];
  if (tape_wants(x)) {
    out.set_requires_grad(true);
    auto nx = x.node();
    auto no = out.node();
    active_tape()->record({x}, out, [mask, nx, no]() {
      if (!nx->requires_grad) return;
      const double* g = no->grad.data();
      double* gx = nx->ensure_grad().data();
      for (std::size_t i = 0; i < mask->size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

void backward(const Tensor& root) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(root);
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  Tensor grad = Tensor::zeros(x.shape());
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  double* pv = probe.values_mut().data();
  double* pg = grad.values_mut().data();
  const auto n = static_cast<std::size_t>(x.numel());
  const double* orig = x.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    pv[i] = orig[i] + h;
    const double fp = f(probe);
    pv[i] = orig[i] - h;
    const double fm = f(probe);
    pv[i] = orig[i];
    pg[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace histonet::ops
