#pragma once

// Shared helpers for the test suites. Requires doctest.h to be included
// first by the translation unit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "histonet/ops.hpp"
#include "histonet/rng.hpp"
#include "histonet/tensor.hpp"

namespace test_util {

inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

inline histonet::Tensor normal_tensor(histonet::Rng& rng, histonet::Shape shape,
                                      double stddev = 1.0, bool requires_grad = true) {
  histonet::Tensor t = histonet::Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.values_mut()) v = rng.normal() * stddev;
  return t;
}

// Runs `fwd` (a scalar-valued graph over `inputs`) under a fresh tape,
// backpropagates, and compares every input's analytic gradient against the
// central finite-difference oracle. Returns the max relative error.
inline double graph_fd_max_rel_err(const std::function<histonet::Tensor()>& fwd,
                                   std::vector<histonet::Tensor> inputs, double h = 1e-5) {
  using histonet::Tensor;
  for (auto& t : inputs) t.zero_grad();
  histonet::Tape tape;
  {
    histonet::TapeScope scope(tape);
    Tensor loss = fwd();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> saved(t.values().begin(), t.values().end());
    Tensor fd = histonet::ops::finite_difference_grad(
        [&](const Tensor& probe) {
          std::copy(probe.values().begin(), probe.values().end(), t.values_mut().begin());
          const double v = fwd().item();
          std::copy(saved.begin(), saved.end(), t.values_mut().begin());
          return v;
        },
        t, h);
    REQUIRE(t.has_grad());
    auto g = t.grad();
    auto f = fd.values();
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, rel_err(g[i], f[i]));
  }
  return worst;
}

inline void require_close(const histonet::Tensor& a, const histonet::Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    CAPTURE(i);
    REQUIRE(std::fabs(va[i] - vb[i]) <= tol);
  }
}

}  // namespace test_util
