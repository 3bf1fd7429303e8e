#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fusenet/tensor.hpp"

namespace fusenet {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // Relative error uses max(|analytic|, |numeric|, floor) as denominator so
  // gradients that are zero up to round-off do not divide by ~0.
  double denominator_floor = 1e-3;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  bool passed = false;
  std::size_t coordinates_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>& inputs)>;

// Compares tape gradients of a scalar function against central finite
// differences. `inputs` must be leaves; they are perturbed in place and
// restored afterwards.
GradCheckReport grad_check(const ScalarFunction& f, std::vector<Tensor> inputs, const GradCheckOptions& options = {});

}  // namespace fusenet
