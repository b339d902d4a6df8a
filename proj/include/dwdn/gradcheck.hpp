#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "dwdn/tensor.hpp"

namespace dwdn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  // Location of the worst coordinate.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the autodiff gradient of scalar `f` at `x` against central
/// differences (five-point stencil). Relative error per coordinate is
/// |autodiff - numeric| / max(|autodiff|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-3);

/// Multi-tensor form for models: `loss` closes over `params`, which are
/// perturbed in place. At most `max_coords_per_tensor` coordinates are probed
/// per tensor (chosen by `seed`); 0 means all of them.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  double eps = 1e-3, std::size_t max_coords_per_tensor = 0,
                                  std::uint64_t seed = 0);

}  // namespace dwdn
