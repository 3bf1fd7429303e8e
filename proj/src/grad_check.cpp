#include "fusenet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusenet/rng.hpp"

namespace fusenet {

GradCheckReport grad_check(const ScalarFunction& f, std::vector<Tensor> inputs, const GradCheckOptions& options) {
  if (options.epsilon < 1e-7 || options.epsilon > 1e-3) {
    throw UsageError("grad_check: epsilon must lie in [1e-7, 1e-3], got " + std::to_string(options.epsilon));
  }
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  const Tensor out = f(inputs);
  if (out.numel() != 1) {
    throw UsageError("grad_check: function must be scalar-valued, got shape " + shape_string(out.shape()));
  }
  out.backward();

  auto evaluate = [&] {
    NoGradGuard no_grad;
    return f(inputs).item();
  };

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = inputs[i].grad();
    auto values = inputs[i].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      for (std::size_t k = 0; k < options.max_coords_per_input; ++k) {
        std::swap(coords[k], coords[k + static_cast<std::size_t>(rng.integer(0, coords.size() - k - 1))]);
      }
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (auto j : coords) {
      const double saved = values[j];
      values[j] = saved + options.epsilon;
      const double up = evaluate();
      values[j] = saved - options.epsilon;
      const double down = evaluate();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), options.denominator_floor});
      const double err = std::abs(analytic[j] - numeric) / denom;
      ++report.coordinates_checked;
      if (!(err <= report.max_relative_error)) {
        report.max_relative_error = err;
        report.worst_input = i;
        report.worst_index = j;
        report.worst_analytic = analytic[j];
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

}  // namespace fusenet
