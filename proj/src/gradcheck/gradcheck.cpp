#include "histonet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "histonet/attention.hpp"
#include "histonet/backbone.hpp"
#include "histonet/errors.hpp"
#include "histonet/ops.hpp"
#include "histonet/rng.hpp"
#include "histonet/tensor.hpp"
#include "histonet/training.hpp"

namespace histonet::gradcheck {
namespace {

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

Tensor normal_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (double& v : t.values_mut()) v = rng.normal() * stddev;
  return t;
}

std::vector<std::int64_t> pick_coords(Rng& rng, std::int64_t n, std::int64_t cap) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::int64_t{0});
  if (n <= cap) return idx;
  for (std::int64_t i = 0; i < cap; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(cap));
  return idx;
}

// One reverse pass for the analytic gradients, then central differences at a
// random coordinate subset of every input. `corruption` biases the analytic
// value and exists only for the negative control.
//
// A central difference only estimates a derivative where the map is smooth
// across the whole stencil. The networks under test are piecewise smooth
// (ReLU, max pooling, bilinear cells), and a probe that straddles a kink
// measures a blend of two slopes, not either one. Such probes announce
// themselves: the quadratic residual |f(x+h) - 2 f(x) + f(x-h)| jumps from
// the smooth O(h^2) floor to O(h * slope gap), so any residual above
// h * tolerance is skipped. The detector reads function values only -- it is
// blind to the analytic gradient, so a wrong gradient cannot hide behind it
// (the corrupted negative control still fails on every smooth probe).
double check_graph(const std::function<Tensor()>& fwd, const std::vector<Tensor>& inputs,
                   double h, double tolerance, std::int64_t coords_per_tensor, Rng& rng,
                   double corruption) {
  for (const Tensor& t : inputs) {
    Tensor handle = t;
    handle.zero_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = fwd();
    tape.backward(loss);
  }
  const auto eval = [&fwd]() { return fwd().item(); };  // no active tape: plain forward
  const double base = eval();
  const double kink_residual = h * tolerance;
  double worst = 0.0;
  for (const Tensor& t : inputs) {
    if (!t.has_grad()) throw ContractError("gradcheck: an input received no gradient");
    Tensor handle = t;
    const auto coords = pick_coords(rng, t.numel(), coords_per_tensor);
    std::int64_t checked = 0;
    for (const std::int64_t c : coords) {
      const auto ci = static_cast<std::size_t>(c);
      double* vals = handle.values_mut().data();
      const double saved = vals[ci];
      vals[ci] = saved + h;
      const double fp = eval();
      vals[ci] = saved - h;
      const double fm = eval();
      vals[ci] = saved;
      if (std::fabs(fp - 2.0 * base + fm) > kink_residual) continue;  // stencil straddles a kink
      ++checked;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(t.grad()[ci] + corruption, fd));
    }
    if (checked == 0) {
      throw ContractError("gradcheck: every probe of an input straddled a kink");
    }
  }
  return worst;
}

struct Target {
  std::function<Tensor()> fwd;
  std::vector<Tensor> inputs;
  std::int64_t coords_per_tensor = 8;
};

Target make_cbam_target(Rng& rng) {
  const Tensor f = normal_tensor(rng, {2, 8, 9, 9});
  attention::ChannelAttentionParams cp;
  cp.w0 = normal_tensor(rng, {8, 2}, 0.5);
  cp.w1 = normal_tensor(rng, {2, 8}, 0.5);
  cp.reduction_ratio = 4;
  attention::SpatialAttentionParams sp;
  sp.kernel = normal_tensor(rng, {1, 2, 7, 7}, 0.3);
  return {[=]() { return ops::sum(attention::cbam(f, cp, sp)); },
          {f, cp.w0, cp.w1, sp.kernel},
          8};
}

Target make_self_target(Rng& rng) {
  const Tensor f = normal_tensor(rng, {2, 4, 5, 5});
  attention::SelfAttentionParams p;
  p.wq = normal_tensor(rng, {4, 4}, 0.5);
  p.wk = normal_tensor(rng, {4, 4}, 0.5);
  p.wv = normal_tensor(rng, {4, 4}, 0.5);
  return {[=]() { return ops::sum(attention::self_attention(f, p).output); },
          {f, p.wq, p.wk, p.wv},
          8};
}

Target make_deformable_target(Rng& rng, double h) {
  // The bilinear map is only piecewise smooth: its derivative jumps wherever
  // a sampling position crosses the pixel lattice, and a +-h probe of any
  // input moves a position by at most h * max(|f|, |offset kernel|). Redraw
  // until every offset clears the lattice by a comfortable multiple of that
  // displacement, so the whole finite-difference stencil stays inside one
  // affine cell of the interpolation.
  for (int attempt = 0; attempt < 200; ++attempt) {
    const Tensor f = normal_tensor(rng, {2, 3, 7, 7});
    attention::DeformableAttentionParams p;
    p.offset_kernel = normal_tensor(rng, {18, 3, 3, 3}, 0.05);
    p.value_kernel = normal_tensor(rng, {3, 3, 3, 3}, 0.4);
    double f_max = 0.0;
    for (const double v : f.values()) f_max = std::max(f_max, std::fabs(v));
    const double margin = 8.0 * h * std::max(1.0, f_max);
    const Tensor offsets = ops::conv2d(f, p.offset_kernel, /*stride=*/1, /*padding=*/1);
    bool clear = true;
    for (const double o : offsets.values()) {
      if (std::fabs(o - std::round(o)) < margin) {
        clear = false;
        break;
      }
    }
    if (!clear) continue;
    return {[=]() { return ops::sum(attention::deformable_attention(f, p)); },
            {f, p.offset_kernel, p.value_kernel},
            8};
  }
  throw ContractError("gradcheck: could not draw a deformable case away from the pixel lattice");
}

Target make_se_target(Rng& rng) {
  const Tensor f = normal_tensor(rng, {2, 6, 5, 5});
  const Tensor w_reduce = normal_tensor(rng, {6, 2}, 0.5);
  const Tensor w_expand = normal_tensor(rng, {2, 6}, 0.5);
  return {[=]() { return ops::sum(backbone::se_block(f, w_reduce, w_expand, 0.25)); },
          {f, w_reduce, w_expand},
          8};
}

Target make_mbconv_target(Rng& rng) {
  const Tensor f = normal_tensor(rng, {2, 5, 9, 9});
  backbone::MBConvParams p;
  p.expand_w = normal_tensor(rng, {20, 5, 1, 1}, 0.3);
  p.dw_w = normal_tensor(rng, {20, 1, 3, 3}, 0.3);
  p.se_reduce = normal_tensor(rng, {20, 5}, 0.3);
  p.se_expand = normal_tensor(rng, {5, 20}, 0.3);
  p.project_w = normal_tensor(rng, {5, 20, 1, 1}, 0.3);
  p.stride = 1;  // stride 1 with matching widths exercises the residual path
  p.se_ratio = 0.25;
  return {[=]() { return ops::sum(backbone::mbconv(f, p)); },
          {f, p.expand_w, p.dw_w, p.se_reduce, p.se_expand, p.project_w},
          8};
}

Target make_model_target(Rng& rng, std::uint64_t restart_seed) {
  backbone::ModelConfig cfg;  // toy defaults: stem 8, stages 16x1/32x2, CBAM
  cfg.in_channels = 3;
  cfg.seed = restart_seed;
  auto model = std::make_shared<backbone::Model>(backbone::build_model(cfg));
  const Tensor batch = normal_tensor(rng, {2, 3, 32, 32});
  Tensor labels = Tensor::zeros({2});
  for (double& v : labels.values_mut()) v = static_cast<double>(rng.uniform_int(2));
  const std::uint64_t dropout_seed = mix_seed(restart_seed, 0xD0);
  std::vector<Tensor> inputs{batch};
  for (const auto& [name, param] : model->parameters()) inputs.push_back(param);
  Target t;
  t.fwd = [model, batch, labels, dropout_seed]() {
    const Tensor logits = backbone::forward(*model, batch, /*training=*/true, dropout_seed);
    return training::bce_loss(logits, labels);
  };
  t.inputs = std::move(inputs);
  t.coords_per_tensor = 4;  // the model has ~35k parameters; spot-check each tensor
  return t;
}

const std::vector<std::string>& all_targets() {
  static const std::vector<std::string> kAll{"cbam", "self", "deformable",
                                             "se",   "mbconv", "model"};
  return kAll;
}

Target make_target(const std::string& name, Rng& rng, std::uint64_t restart_seed, double h) {
  if (name == "cbam") return make_cbam_target(rng);
  if (name == "self") return make_self_target(rng);
  if (name == "deformable") return make_deformable_target(rng, h);
  if (name == "se") return make_se_target(rng);
  if (name == "mbconv") return make_mbconv_target(rng);
  if (name == "model") return make_model_target(rng, restart_seed);
  throw ConfigError("unknown gradcheck target '" + name + "'");
}

Report run_impl(const std::string& which, std::uint64_t seed, int num_seeds, double h,
                double tolerance, double corruption) {
  if (num_seeds < 1) throw ConfigError("gradcheck needs at least one seed");
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  std::vector<std::string> chosen;
  if (which == "all") {
    chosen = all_targets();
  } else if (std::find(all_targets().begin(), all_targets().end(), which) !=
             all_targets().end()) {
    chosen = {which};
  } else {
    throw ConfigError("unknown gradcheck target '" + which + "'");
  }

  Report report;
  report.tolerance = tolerance;
  for (std::size_t ti = 0; ti < chosen.size(); ++ti) {
    TargetResult result;
    result.target = chosen[ti];
    result.seeds = num_seeds;
    for (int s = 0; s < num_seeds; ++s) {
      const std::uint64_t restart_seed =
          mix_seed(seed, static_cast<std::uint64_t>(ti), static_cast<std::uint64_t>(s));
      Rng rng(restart_seed);
      const Target target = make_target(chosen[ti], rng, restart_seed, h);
      result.max_rel_err =
          std::max(result.max_rel_err, check_graph(target.fwd, target.inputs, h, tolerance,
                                                   target.coords_per_tensor, rng, corruption));
    }
    result.pass = result.max_rel_err < tolerance;
    report.targets.push_back(std::move(result));
  }
  return report;
}

}  // namespace

bool Report::all_pass() const {
  return !targets.empty() &&
         std::all_of(targets.begin(), targets.end(),
                     [](const TargetResult& t) { return t.pass; });
}

std::string Report::to_table() const {
  std::string out = "target        seeds  max_rel_err   result\n";
  for (const TargetResult& t : targets) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-13s %5d  %-12.3e  %s\n", t.target.c_str(), t.seeds,
                  t.max_rel_err, t.pass ? "pass" : "FAIL");
    out += line;
  }
  return out;
}

Report run(const std::string& which, std::uint64_t seed, int num_seeds, double h,
           double tolerance) {
  return run_impl(which, seed, num_seeds, h, tolerance, 0.0);
}

Report run_corrupted(std::uint64_t seed) {
  return run_impl("cbam", seed, 3, 1e-5, 1e-4, 0.01);
}

}  // namespace histonet::gradcheck
