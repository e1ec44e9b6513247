#pragma once

// Central finite-difference gradient checking. The oracle only drives the
// forward path: it perturbs one input scalar at a time and differences the
// loss, so it stays independent of every backprop rule it verifies.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "neuroswap/tensor.hpp"

namespace neuroswap {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst_input;
};

// relative error |g_ad - g_fd| / max(1, |g_fd|), maximized over all entries
// of all inputs. `loss_fn` must rebuild the graph from the given leaves on
// every call. Default step follows the spec'd oracle (h = 1e-5, f64).
inline GradCheckResult finite_difference_check(
    std::vector<Tensor64>& inputs, const std::function<Tensor64()>& loss_fn,
    const std::vector<std::string>& names = {}, double h = 1e-5) {
  // analytic gradients
  for (auto& in : inputs) in.zero_grad();
  {
    Tensor64 loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    analytic.emplace_back(in.grad().begin(), in.grad().end());
    if (analytic.back().empty()) analytic.back().assign(in.numel(), 0.0);
  }

  GradCheckResult result;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data_mut();
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = data[i];
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = orig + h;
        fp = loss_fn().item();
        data[i] = orig - h;
        fm = loss_fn().item();
        data[i] = orig;
      }
      const double g_fd = (fp - fm) / (2.0 * h);
      const double g_ad = analytic[k][i];
      const double rel = std::abs(g_ad - g_fd) / std::max(1.0, std::abs(g_fd));
      ++result.checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_input =
            (k < names.size() ? names[k] : "input" + std::to_string(k)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace neuroswap
