#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flowdet/tensor.hpp"

namespace flowdet {

struct GradCheckReport {
  // (input name, max relative error over its entries)
  std::vector<std::pair<std::string, double>> per_input;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& [n, e] : per_input) m = std::max(m, e);
    return m;
  }
  bool pass(double rtol) const { return max_rel_err() <= rtol; }
};

// One differentiable input under check: a mutable value buffer the loss
// closure reads, and the analytic gradient claimed for it.
template <typename T>
struct GradCheckInput {
  std::string name;
  Tensor<T>* value;
  const Tensor<T>* analytic_grad;
};

// Central-difference check of analytic gradients against a scalar loss
// closure. The closure must recompute the loss from the current contents of
// every registered value buffer. Failures are reported, not thrown.
template <typename T>
GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::vector<GradCheckInput<T>>& inputs, double eps = 1e-5) {
  GradCheckReport report;
  for (const auto& in : inputs) {
    double max_err = 0.0;
    for (std::size_t i = 0; i < in.value->data.size(); ++i) {
      const T orig = in.value->data[i];
      in.value->data[i] = orig + static_cast<T>(eps);
      const double lp = loss();
      in.value->data[i] = orig - static_cast<T>(eps);
      const double lm = loss();
      in.value->data[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = static_cast<double>(in.analytic_grad->data[i]);
      const double denom = std::max(std::abs(fd) + std::abs(an), 1e-6);
      max_err = std::max(max_err, std::abs(fd - an) / denom);
    }
    report.per_input.emplace_back(in.name, max_err);
  }
  return report;
}

}  // namespace flowdet
