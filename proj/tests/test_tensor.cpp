#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "histonet/errors.hpp"
#include "histonet/ops.hpp"
#include "histonet/rng.hpp"
#include "histonet/tensor.hpp"
#include "test_util.hpp"

using namespace histonet;
namespace tu = test_util;

namespace {

std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }

void require_bitwise(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    CAPTURE(i);
    REQUIRE(bits(va[i]) == bits(vb[i]));
  }
}

}  // namespace

TEST_CASE("tensor construction and validation") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({-1}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor s = Tensor::scalar(4.5);
  CHECK(s.item() == 4.5);
  CHECK_THROWS_AS(t.item(), ContractError);
  Tensor v = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(v.at({1, 0}) == 3.0);
  CHECK_THROWS_AS(v.at({2, 0}), ContractError);
}

TEST_CASE("clone is a detached deep copy") {
  Tensor a = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tensor b = a.clone();
  b.values_mut()[0] = 99.0;
  CHECK(a.values()[0] == 1.0);
  CHECK(b.requires_grad());
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("sigmoid relu tanh scalar examples") {
  Tensor x = Tensor::from_values({3}, {0.0, -3.2, 3.2});
  Tensor s = ops::sigmoid(x);
  CHECK(s.values()[0] == 0.5);
  Tensor r = ops::relu(x);
  CHECK(r.values()[1] == 0.0);
  CHECK(r.values()[2] == 3.2);
  // Independent high-precision value of 1/(1+e^-2).
  Tensor two = Tensor::scalar(2.0);
  CHECK(std::fabs(ops::sigmoid(two).item() - 0.88079707797788231) < 1e-15);
  CHECK(std::fabs(ops::tanh(Tensor::scalar(0.5)).item() - std::tanh(0.5)) == 0.0);
  // Large magnitudes stay finite (exp of negative magnitude only).
  Tensor big = Tensor::from_values({2}, {1000.0, -1000.0});
  Tensor sb = ops::sigmoid(big);
  CHECK(sb.values()[0] == 1.0);
  CHECK(sb.values()[1] == 0.0);
  CHECK(sb.all_finite());
}

TEST_CASE("broadcast add/sub/mul") {
  Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_values({3}, {10, 20, 30});
  Tensor c = ops::add(a, b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.at({0, 0}) == 11.0);
  CHECK(c.at({1, 2}) == 36.0);
  Tensor col = Tensor::from_values({2, 1}, {100, 200});
  Tensor d = ops::mul(a, col);
  CHECK(d.at({0, 2}) == 300.0);
  CHECK(d.at({1, 0}) == 800.0);
  Tensor e = ops::sub(a, a);
  for (double v : e.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), BroadcastError);
  CHECK_THROWS_AS(ops::broadcast_shapes({2, 3}, {2, 4}), BroadcastError);
  // Channel-gate style broadcast: (b,c,h,w) * (b,c,1,1).
  Tensor f = Tensor::full({2, 3, 4, 4}, 2.0);
  Tensor g = Tensor::from_values({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  Tensor got = ops::mul(f, g);
  CHECK(got.at({0, 1, 3, 3}) == 4.0);
  CHECK(got.at({1, 2, 0, 0}) == 12.0);
}

TEST_CASE("matmul examples") {
  Tensor eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  Tensor x = tu::normal_tensor(rng, {3, 5}, 1.0, false);
  require_bitwise(ops::matmul(eye, x), x);

  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 1}, {5, 6});
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.values()[0] == 17.0);
  CHECK(c.values()[1] == 39.0);

  Tensor s = ops::matmul(Tensor::from_values({1, 1}, {3.0}), Tensor::from_values({1, 1}, {7.0}));
  CHECK(s.values()[0] == 21.0);

  CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
  CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3, 4}), Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("matmul_batched matches per-slice matmul") {
  Rng rng(7);
  Tensor a = tu::normal_tensor(rng, {3, 4, 5}, 1.0, false);
  Tensor b2 = tu::normal_tensor(rng, {5, 6}, 1.0, false);
  Tensor b3 = tu::normal_tensor(rng, {3, 5, 6}, 1.0, false);
  Tensor out2 = ops::matmul_batched(a, b2);
  Tensor out3 = ops::matmul_batched(a, b3);
  CHECK(out2.shape() == Shape{3, 4, 6});
  for (int s = 0; s < 3; ++s) {
    Tensor as = Tensor::zeros({4, 5});
    std::copy_n(a.values().data() + s * 20, 20, as.values_mut().data());
    Tensor bs = Tensor::zeros({5, 6});
    std::copy_n(b3.values().data() + s * 30, 30, bs.values_mut().data());
    Tensor ref2 = ops::matmul(as, b2);
    Tensor ref3 = ops::matmul(as, bs);
    for (int i = 0; i < 24; ++i) {
      CHECK(bits(out2.values()[s * 24 + i]) == bits(ref2.values()[i]));
      CHECK(bits(out3.values()[s * 24 + i]) == bits(ref3.values()[i]));
    }
  }
}

TEST_CASE("transpose_last2 round trip and values") {
  Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = ops::transpose_last2(a);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({0, 1}) == 4.0);
  CHECK(t.at({2, 0}) == 3.0);
  require_bitwise(ops::transpose_last2(t), a);
  CHECK_THROWS_AS(ops::transpose_last2(Tensor::zeros({3})), ShapeError);
}

TEST_CASE("conv2d trivial kernels") {
  Rng rng(3);
  Tensor x = tu::normal_tensor(rng, {1, 1, 4, 4}, 1.0, false);
  Tensor w1 = Tensor::from_values({1, 1, 1, 1}, {1.0});
  require_bitwise(ops::conv2d(x, w1, 1, 0), x);

  Tensor ones_x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor ones_w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor nine = ops::conv2d(ones_x, ones_w, 1, 0);
  CHECK(nine.shape() == Shape{1, 1, 1, 1});
  CHECK(nine.item() == 9.0);
}

TEST_CASE("conv2d matches naive quadruple-loop reference") {
  Rng rng(11);
  const int batch = 2, ci = 3, h = 5, wd = 5, co = 4, kh = 3, kw = 3;
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor x = tu::normal_tensor(rng, {batch, ci, h, wd}, 1.0, false);
      Tensor w = tu::normal_tensor(rng, {co, ci, kh, kw}, 1.0, false);
      Tensor out = ops::conv2d(x, w, stride, pad);
      const int oh = (h + 2 * pad - kh) / stride + 1;
      const int ow = (wd + 2 * pad - kw) / stride + 1;
      CHECK(out.shape() == Shape{batch, co, oh, ow});
      for (int b = 0; b < batch; ++b) {
        for (int oc = 0; oc < co; ++oc) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              double acc = 0.0;
              for (int c = 0; c < ci; ++c) {
                for (int i = 0; i < kh; ++i) {
                  for (int j = 0; j < kw; ++j) {
                    const int iy = oy * stride + i - pad;
                    const int ix = ox * stride + j - pad;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                    acc += w.at({oc, c, i, j}) * x.at({b, c, iy, ix});
                  }
                }
              }
              CHECK(std::fabs(out.at({b, oc, oy, ox}) - acc) < 1e-12);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("conv2d grouped and depthwise") {
  Rng rng(13);
  // groups == channels: each output plane depends on exactly one input plane.
  Tensor x = tu::normal_tensor(rng, {1, 4, 6, 6}, 1.0, false);
  Tensor w = tu::normal_tensor(rng, {4, 1, 3, 3}, 1.0, false);
  Tensor out = ops::conv2d(x, w, 1, 1, 4);
  CHECK(out.shape() == Shape{1, 4, 6, 6});
  for (int c = 0; c < 4; ++c) {
    Tensor xc = Tensor::zeros({1, 1, 6, 6});
    std::copy_n(x.values().data() + c * 36, 36, xc.values_mut().data());
    Tensor wc = Tensor::zeros({1, 1, 3, 3});
    std::copy_n(w.values().data() + c * 9, 9, wc.values_mut().data());
    Tensor ref = ops::conv2d(xc, wc, 1, 1);
    for (int i = 0; i < 36; ++i) {
      CHECK(bits(out.values()[c * 36 + i]) == bits(ref.values()[i]));
    }
  }
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({4, 2, 3, 3}), 1, 1, 4), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({3, 1, 3, 3}), 1, 1, 4), ShapeError);
}

TEST_CASE("conv2d rejects non-positive output extents and bad config") {
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  Tensor w = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(ops::conv2d(x, w, 1, 0), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({1, 1, 1, 1}), 0, 0), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({1, 1, 1, 1}), 1, -1), ConfigError);
}

TEST_CASE("pool2d examples and naive reference") {
  Tensor c = Tensor::full({1, 2, 4, 4}, 3.25);
  Tensor avg = ops::pool2d(c, ops::PoolKind::avg, 2, 2, 2);
  for (double v : avg.values()) CHECK(v == 3.25);

  Tensor m = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(ops::pool2d(m, ops::PoolKind::max, 2, 2, 2).item() == 4.0);

  Rng rng(17);
  Tensor x = tu::normal_tensor(rng, {2, 3, 7, 6}, 1.0, false);
  for (auto kind : {ops::PoolKind::avg, ops::PoolKind::max}) {
    Tensor out = ops::pool2d(x, kind, 3, 2, 2);
    const int oh = (7 - 3) / 2 + 1;
    const int ow = (6 - 2) / 2 + 1;
    CHECK(out.shape() == Shape{2, 3, oh, ow});
    for (int b = 0; b < 2; ++b) {
      for (int ch = 0; ch < 3; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            double acc = kind == ops::PoolKind::avg ? 0.0 : -1e300;
            for (int i = 0; i < 3; ++i) {
              for (int j = 0; j < 2; ++j) {
                const double v = x.at({b, ch, oy * 2 + i, ox * 2 + j});
                if (kind == ops::PoolKind::avg) {
                  acc += v;
                } else {
                  acc = std::max(acc, v);
                }
              }
            }
            if (kind == ops::PoolKind::avg) acc /= 6.0;
            CHECK(std::fabs(out.at({b, ch, oy, ox}) - acc) < 1e-12);
          }
        }
      }
    }
  }
  CHECK_THROWS_AS(ops::pool2d(m, ops::PoolKind::max, 3, 3, 1), ShapeError);
}

TEST_CASE("max-pool backward routes gradient only to argmax, first-index ties") {
  Tensor x = Tensor::from_values({1, 1, 2, 2}, {5, 5, 1, 5}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = ops::pool2d(x, ops::PoolKind::max, 2, 2, 2);
    Tensor s = ops::sum(y);
    tape.backward(s);
  }
  auto g = x.grad();
  CHECK(g[0] == 1.0);  // first of the tied maxima in scan order
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("global_pool examples") {
  Tensor c = Tensor::full({2, 3, 4, 5}, -1.5);
  Tensor avg = ops::global_pool(c, ops::PoolKind::avg);
  CHECK(avg.shape() == Shape{2, 3});
  for (double v : avg.values()) CHECK(v == -1.5);

  Tensor q = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(ops::global_pool(q, ops::PoolKind::avg).values()[0] == 2.5);
  CHECK(ops::global_pool(q, ops::PoolKind::max).values()[0] == 4.0);

  Rng rng(23);
  Tensor x = tu::normal_tensor(rng, {2, 4, 3, 3}, 1.0, false);
  Tensor got = ops::global_pool(x, ops::PoolKind::avg);
  for (int b = 0; b < 2; ++b) {
    for (int ch = 0; ch < 4; ++ch) {
      double acc = 0.0;
      for (int i = 0; i < 9; ++i) acc += x.values()[(b * 4 + ch) * 9 + i];
      CHECK(std::fabs(got.at({b, ch}) - acc / 9.0) < 1e-12);
    }
  }
}

TEST_CASE("channel_mean and channel_max") {
  Tensor x = Tensor::from_values({1, 3, 1, 2}, {1, 10, 2, 20, 6, 30});
  Tensor mean = ops::channel_mean(x);
  Tensor mx = ops::channel_max(x);
  CHECK(mean.shape() == Shape{1, 1, 1, 2});
  CHECK(mean.values()[0] == 3.0);
  CHECK(mean.values()[1] == 20.0);
  CHECK(mx.values()[0] == 6.0);
  CHECK(mx.values()[1] == 30.0);
}

TEST_CASE("softmax examples and invariants") {
  Tensor u = Tensor::full({4}, 2.0);
  Tensor usm = ops::softmax(u, 0);
  for (double v : usm.values()) CHECK(std::fabs(v - 0.25) < 1e-15);

  Tensor x = Tensor::from_values({3}, {0.5, -1.0, 2.0});
  Tensor shifted = Tensor::from_values({3}, {0.5 + 7.0, -1.0 + 7.0, 2.0 + 7.0});
  tu::require_close(ops::softmax(x, 0), ops::softmax(shifted, 0), 1e-12);

  Tensor two = Tensor::from_values({2}, {0.0, std::log(3.0)});
  Tensor p = ops::softmax(two, 0);
  CHECK(std::fabs(p.values()[0] - 0.25) < 1e-12);
  CHECK(std::fabs(p.values()[1] - 0.75) < 1e-12);

  Rng rng(29);
  Tensor big = tu::normal_tensor(rng, {3, 5, 4}, 10.0, false);
  for (int axis : {0, 1, 2, -1}) {
    Tensor sm = ops::softmax(big, axis);
    for (double v : sm.values()) CHECK(v > 0.0);
    const int ax = axis < 0 ? axis + 3 : axis;
    const std::int64_t n = big.dim(ax);
    std::int64_t outer = 1, inner = 1;
    for (int a2 = 0; a2 < ax; ++a2) outer *= big.dim(a2);
    for (int a2 = ax + 1; a2 < 3; ++a2) inner *= big.dim(a2);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        double s = 0.0;
        for (std::int64_t k = 0; k < n; ++k) s += sm.values()[o * n * inner + k * inner + in];
        CHECK(std::fabs(s - 1.0) < 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(ops::softmax(u, 3), ShapeError);
}

TEST_CASE("dense examples") {
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w0 = Tensor::zeros({3, 2});
  Tensor b = Tensor::from_values({2}, {5.0, -1.0});
  Tensor out = ops::dense(x, w0, b);
  CHECK(out.at({0, 0}) == 5.0);
  CHECK(out.at({1, 1}) == -1.0);

  Tensor eye = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  require_bitwise(ops::dense(x, eye, Tensor::zeros({3})), x);

  Rng rng(31);
  Tensor xr = tu::normal_tensor(rng, {4, 6}, 1.0, false);
  Tensor wr = tu::normal_tensor(rng, {6, 3}, 1.0, false);
  Tensor br = tu::normal_tensor(rng, {3}, 1.0, false);
  require_bitwise(ops::dense(xr, wr, br), ops::add(ops::matmul(xr, wr), br));
  CHECK_THROWS_AS(ops::dense(xr, wr, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("dropout semantics") {
  Rng rng(37);
  Tensor x = tu::normal_tensor(rng, {100000}, 1.0, false);
  require_bitwise(ops::dropout(x, 0.0, true, 9), x);
  require_bitwise(ops::dropout(x, 0.9, false, 9), x);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, true, 9), ConfigError);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, true, 9), ConfigError);

  Tensor d = ops::dropout(x, 0.4, true, 1234);
  std::size_t dropped = 0;
  const double keep_scale = 1.0 / 0.6;
  for (std::size_t i = 0; i < 100000; ++i) {
    const double v = d.values()[i];
    if (v == 0.0) {
      ++dropped;
    } else {
      CHECK(std::fabs(v - x.values()[i] * keep_scale) < 1e-15);
    }
  }
  const double frac = static_cast<double>(dropped) / 100000.0;
  CHECK(frac > 0.39);
  CHECK(frac < 0.41);
  // Same seed -> same mask, different seed -> different mask.
  require_bitwise(ops::dropout(x, 0.4, true, 1234), d);
  std::size_t differs = 0;
  Tensor d2 = ops::dropout(x, 0.4, true, 1235);
  for (std::size_t i = 0; i < 100000; ++i) {
    if (bits(d2.values()[i]) != bits(d.values()[i])) ++differs;
  }
  CHECK(differs > 1000);
}

TEST_CASE("backward on sum and polynomial") {
  Rng rng(41);
  Tensor x = tu::normal_tensor(rng, {3, 4}, 1.0, true);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor s = ops::sum(x);
    tape.backward(s);
  }
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor s = ops::sum(ops::mul(x, x));
    tape.backward(s);
  }
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(std::fabs(x.grad()[i] - 2.0 * x.values()[i]) < 1e-14);
  }
}

TEST_CASE("gradient accumulates once per use and across reuse") {
  Tensor x = Tensor::from_values({2}, {3.0, -2.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    // s = sum(x*x + x): ds/dx = 2x + 1.
    Tensor s = ops::sum(ops::add(ops::mul(x, x), x));
    tape.backward(s);
  }
  CHECK(std::fabs(x.grad()[0] - 7.0) < 1e-14);
  CHECK(std::fabs(x.grad()[1] + 3.0) < 1e-14);
}

TEST_CASE("tape contracts") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor s;
  {
    TapeScope scope(tape);
    s = ops::sum(x);
  }
  CHECK(tape.size() == 1);
  CHECK(tape.contains(s));
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), ContractError);  // tape already consumed

  Tape t2;
  Tensor y;
  {
    TapeScope scope(t2);
    y = ops::mul(x, x);
  }
  CHECK_THROWS_AS(t2.backward(y), ContractError);  // non-scalar root

  Tape t3;
  CHECK_THROWS_AS(t3.backward(Tensor::scalar(1.0, true)), ContractError);  // not on tape
  CHECK_THROWS_AS(ops::backward(s), ContractError);  // no active tape
}

TEST_CASE("no recording without active tape or without requires_grad") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  Tensor y = ops::mul(x, x);  // no tape active
  CHECK_FALSE(y.requires_grad());

  Tensor z = Tensor::from_values({2}, {1.0, 2.0}, false);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor w = ops::mul(z, z);
    CHECK_FALSE(w.requires_grad());
    CHECK(tape.size() == 0);
  }
}

TEST_CASE("composite graph gradients match finite differences") {
  Rng rng(43);
  Tensor x = tu::normal_tensor(rng, {2, 3, 4, 4});
  Tensor w = tu::normal_tensor(rng, {2, 3, 3, 3}, 0.5);
  auto fwd = [&]() {
    Tensor c = ops::conv2d(x, w, 1, 1);
    Tensor a = ops::sigmoid(c);
    Tensor p = ops::pool2d(a, ops::PoolKind::avg, 2, 2, 2);
    return ops::sum(ops::mul(p, p));
  };
  CHECK(tu::graph_fd_max_rel_err(fwd, {x, w}) < 1e-4);
}

TEST_CASE("gradients through softmax, dense, dropout mask, concat, transpose") {
  Rng rng(47);
  Tensor x = tu::normal_tensor(rng, {3, 4});
  Tensor w = tu::normal_tensor(rng, {4, 5});
  Tensor b = tu::normal_tensor(rng, {5});
  auto fwd = [&]() {
    Tensor h = ops::dense(x, w, b);
    Tensor sm = ops::softmax(h, 1);
    Tensor d = ops::dropout(sm, 0.3, true, 999);  // fixed seed -> fixed mask
    Tensor cat = ops::concat(d, sm, 1);
    Tensor t = ops::transpose_last2(cat);
    return ops::sum(ops::mul(t, t));
  };
  CHECK(tu::graph_fd_max_rel_err(fwd, {x, w, b}) < 1e-4);
}

TEST_CASE("gradients through pooling reductions and scale") {
  Rng rng(53);
  Tensor x = tu::normal_tensor(rng, {2, 3, 5, 5});
  auto fwd = [&]() {
    Tensor m = ops::channel_mean(x);
    Tensor c = ops::concat(m, ops::channel_max(x), 1);
    Tensor g = ops::global_pool(ops::mul(c, c), ops::PoolKind::avg);
    Tensor gm = ops::global_pool(x, ops::PoolKind::max);
    Tensor s = ops::add(ops::sum(g), ops::sum(gm));
    return ops::scale(s, 1.5);
  };
  CHECK(tu::graph_fd_max_rel_err(fwd, {x}) < 1e-4);
}

TEST_CASE("gradients through matmul_batched and reshape") {
  Rng rng(59);
  Tensor a = tu::normal_tensor(rng, {2, 3, 4});
  Tensor b = tu::normal_tensor(rng, {4, 3});
  auto fwd = [&]() {
    Tensor p = ops::matmul_batched(a, b);
    Tensor r = ops::reshape(p, {2, 9});
    return ops::sum(ops::mul(r, r));
  };
  CHECK(tu::graph_fd_max_rel_err(fwd, {a, b}) < 1e-4);

  Tensor b3 = tu::normal_tensor(rng, {2, 4, 3});
  auto fwd3 = [&]() {
    Tensor p = ops::matmul_batched(a, b3);
    return ops::sum(ops::mul(p, p));
  };
  CHECK(tu::graph_fd_max_rel_err(fwd3, {a, b3}) < 1e-4);
}

TEST_CASE("finite_difference_grad basics") {
  Tensor x = Tensor::from_values({4}, {1, -2, 3, 0.5});
  Tensor ones = ops::finite_difference_grad(
      [](const Tensor& t) {
        double acc = 0.0;
        for (double v : t.values()) acc += v;
        return acc;
      },
      x, 1e-5);
  for (double v : ones.values()) CHECK(std::fabs(v - 1.0) < 1e-9);

  Tensor three = Tensor::scalar(3.0);
  Tensor d = ops::finite_difference_grad(
      [](const Tensor& t) { return t.item() * t.item(); }, three, 1e-5);
  CHECK(std::fabs(d.item() - 6.0) < 1e-6);
  CHECK_THROWS_AS(
      ops::finite_difference_grad([](const Tensor& t) { return t.item(); }, three, 0.0),
      ContractError);
}

TEST_CASE("shape formulas hold over randomized cases") {
  Rng rng(61);
  int cases = 0;
  // Broadcast: mutate a base shape into a compatible partner, verify result.
  for (int it = 0; it < 500; ++it) {
    const int rank = 1 + static_cast<int>(rng.uniform_int(4));
    Shape a(static_cast<std::size_t>(rank));
    for (auto& d : a) d = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
    const int rank_b = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(rank)));
    Shape b(static_cast<std::size_t>(rank_b));
    for (int k = 0; k < rank_b; ++k) {
      const std::int64_t full = a[static_cast<std::size_t>(rank - rank_b + k)];
      b[static_cast<std::size_t>(k)] = rng.uniform01() < 0.5 ? 1 : full;
    }
    Shape expect = a;
    Tensor out = ops::add(Tensor::zeros(a), Tensor::zeros(b));
    CHECK(out.shape() == expect);
    ++cases;
  }
  // Conv: random geometry, output extent floor((H+2p-k)/s)+1.
  for (int it = 0; it < 300; ++it) {
    const int k = 1 + 2 * static_cast<int>(rng.uniform_int(3));  // 1,3,5
    const int pad = static_cast<int>(rng.uniform_int(3));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int h = k + static_cast<int>(rng.uniform_int(8));
    const int w = k + static_cast<int>(rng.uniform_int(8));
    const int ci = 1 + static_cast<int>(rng.uniform_int(3));
    const int co = 1 + static_cast<int>(rng.uniform_int(3));
    Tensor out = ops::conv2d(Tensor::zeros({1, ci, h, w}), Tensor::zeros({co, ci, k, k}),
                             stride, pad);
    CHECK(out.dim(2) == (h + 2 * pad - k) / stride + 1);
    CHECK(out.dim(3) == (w + 2 * pad - k) / stride + 1);
    CHECK(out.dim(1) == co);
    ++cases;
  }
  // Pool: window fits, output extent floor((H-k)/s)+1.
  for (int it = 0; it < 300; ++it) {
    const int k = 1 + static_cast<int>(rng.uniform_int(4));
    const int stride = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = k + static_cast<int>(rng.uniform_int(9));
    const int w = k + static_cast<int>(rng.uniform_int(9));
    Tensor out = ops::pool2d(Tensor::zeros({1, 2, h, w}),
                             rng.uniform01() < 0.5 ? ops::PoolKind::avg : ops::PoolKind::max, k,
                             k, stride);
    CHECK(out.dim(2) == (h - k) / stride + 1);
    CHECK(out.dim(3) == (w - k) / stride + 1);
    ++cases;
  }
  CHECK(cases >= 1000);
}

TEST_CASE("seeded replay is bitwise identical") {
  auto run = []() {
    Rng rng(4242);
    Tensor x = tu::normal_tensor(rng, {2, 3, 6, 6});
    Tensor w = tu::normal_tensor(rng, {4, 3, 3, 3}, 0.5);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      Tensor c = ops::conv2d(x, w, 2, 1);
      Tensor d = ops::dropout(ops::sigmoid(c), 0.2, true, 777);
      loss = ops::sum(ops::mul(d, d));
      tape.backward(loss);
    }
    std::vector<double> res(x.grad().begin(), x.grad().end());
    res.insert(res.end(), w.grad().begin(), w.grad().end());
    res.push_back(loss.item());
    return res;
  };
  const std::vector<double> a = run();
  const std::vector<double> b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(bits(a[i]) == bits(b[i]));
}

TEST_CASE("tensor json round trip") {
  Tensor a = Tensor::from_values({2, 2}, {1.5, -2.25, 3.0, 0.0});
  Tensor b = Tensor::from_json(a.to_json());
  require_bitwise(a, b);
}

TEST_CASE("rng determinism and ranges") {
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) {
    const double ua = a.uniform01();
    CHECK(ua == b.uniform01());
    CHECK(ua >= 0.0);
    CHECK(ua < 1.0);
  }
  Rng c(1);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += c.normal();
  mean /= n;
  CHECK(std::fabs(mean) < 0.05);
  CHECK(histonet::mix_seed(1, 2) != histonet::mix_seed(2, 1));
  CHECK(histonet::mix_seed(1, 2) == histonet::mix_seed(1, 2));
}
