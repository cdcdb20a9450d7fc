#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hiap/tensor.hpp"

namespace hiap {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must rebuild its graph from the current parameter values.
/// Per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, floor), where
/// floor = 1e-6 * max(|f|, 1). Components below the floor are held to an absolute
/// error of about 1e-9 |f| rather than a relative one; otherwise an exact-zero
/// gradient (a key bias under softmax shift invariance) fails on roundoff.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f, const std::vector<Tensor<T>>& params, double h) {
  auto eval = [&f]() {
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) throw Error("finite_diff_check: f(x) is not finite");
    return v;
  };
  for (const auto& p : params) p.zero_grad();
  const Tensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) throw Error("finite_diff_check: f(x) is not finite");
  const auto graph = Graph<T>::build(loss);
  if (!graph.empty()) backward(graph, loss);

  const double floor = 1e-6 * std::max(std::abs(static_cast<double>(loss.item())), 1.0);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto p = params[pi];
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T saved = p[i];
      p[i] = static_cast<T>(saved + h);
      const double up = eval();
      p[i] = static_cast<T>(saved - h);
      const double down = eval();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > result.max_rel_error) result = {rel, pi, i, a, numeric};
    }
  }
  return result;
}

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double h) {
  x.set_requires_grad(true);
  return finite_diff_check<T>([&f, &x]() { return f(x); }, std::vector<Tensor<T>>{x}, h);
}

}  // namespace hiap
