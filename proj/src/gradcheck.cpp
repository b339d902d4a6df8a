#include "dwdn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace dwdn {
namespace {

double finite_loss(const Tensor& t) {
  const double v = static_cast<double>(t.item());
  if (!std::isfinite(v)) throw Error("grad_check: non-finite loss value");
  return v;
}

double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  std::vector<Tensor> params{Tensor::from(leaf.shape(), {leaf.data().begin(), leaf.data().end()}, true)};
  Tensor p = params.front();
  return grad_check_params([&] { return f(p); }, params, eps).max_rel_error;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  double eps, std::size_t max_coords_per_tensor, std::uint64_t seed) {
  if (!(eps > 0)) throw Error("grad_check: eps must be positive");
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) throw Error("grad_check: parameters must be leaves requiring grad");
    p.zero_grad();
  }

  Tensor value = loss();
  finite_loss(value);
  std::vector<std::vector<Scalar>> analytic;
  if (value.requires_grad()) {
    value.backward();
  }
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), Scalar(0));
    }
    for (auto g : analytic.back()) {
      if (!std::isfinite(static_cast<double>(g))) throw Error("grad_check: non-finite gradient");
    }
  }

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_tensor > 0 && coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const Scalar saved = data[i];
      auto at = [&](double offset) {
        data[i] = saved + static_cast<Scalar>(offset);
        return finite_loss(loss());
      };
      // Five-point central stencil, error O(eps^4).
      const double numeric = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps);
      data[i] = saved;
      const double a = static_cast<double>(analytic[t][i]);
      const double err = rel_error(a, numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) {
          report.worst_tensor = t;
          report.worst_index = i;
          report.worst_autodiff = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace dwdn
