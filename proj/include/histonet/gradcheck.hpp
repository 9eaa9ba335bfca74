#pragma once

// Finite-difference verification of the analytic gradients, target by
// target: each attention mechanism, the SE block, an MBConv block, and the
// full toy model with its loss. Every restart rebuilds the graph from a
// fresh seed, backpropagates once, then probes a random subset of
// coordinates per tensor with central differences.

#include <cstdint>
#include <string>
#include <vector>

namespace histonet::gradcheck {

struct TargetResult {
  std::string target;
  int seeds = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct Report {
  std::vector<TargetResult> targets;
  double tolerance = 1e-4;

  bool all_pass() const;
  // Fixed-width text table, one row per target, suitable for the terminal.
  std::string to_table() const;
};

// `which` selects one of {cbam, self, deformable, se, mbconv, model} or
// "all" for the full suite (ConfigError otherwise). Runs `num_seeds`
// independent restarts per target with step `h` and relative-error bound
// `tolerance`; relative error is |a - b| / max(1, |a|, |b|).
Report run(const std::string& which, std::uint64_t seed, int num_seeds = 20, double h = 1e-5,
           double tolerance = 1e-4);

// Negative control: same harness with a deliberately biased analytic
// gradient, so callers can verify that failures are detected and reported
// (the returned report must NOT pass).
Report run_corrupted(std::uint64_t seed);

}  // namespace histonet::gradcheck
