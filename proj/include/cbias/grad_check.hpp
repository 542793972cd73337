#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cbias/tensor.hpp"

namespace cbias {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference step h
  double tolerance = 1e-5;  // on the relative error below
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
  // the floor keeps near-zero gradients from amplifying round-off.
  double floor = 1e-3;
  // 0 checks every entry; otherwise this many entries per input, sampled.
  std::size_t max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string summary() const;
};

// Compares the tape gradient of scalar `f()` with respect to each tensor in
// `inputs` (leaves with requires_grad) against central differences. `f`
// must read the inputs' current values on every call.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace cbias
