#pragma once

#include <cmath>
#include <map>
#include <string>

#include "flowdet/nn.hpp"

namespace flowdet {

template <typename T>
inline void check_grads_finite(const ParamMap<T>& params) {
  for (const auto& [name, p] : params) {
    if (!p.grad.all_finite()) throw NumericError("non-finite gradient in " + name);
  }
}

// value <- value - lr * grad; grads zeroed afterwards.
template <typename T>
void sgd_step(ParamMap<T>& params, double lr) {
  check_grads_finite(params);
  for (auto& [name, p] : params) {
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      p.value.data[i] -= static_cast<T>(lr) * p.grad.data[i];
    }
    p.zero_grad();
  }
}

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::int64_t step = 0;
};

template <typename T>
void adam_step(ParamMap<T>& params, AdamState<T>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  check_grads_finite(params);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor<T>::zeros(p.value.shape)).first;
      state.v.emplace(name, Tensor<T>::zeros(p.value.shape));
    }
    Tensor<T>& m = mit->second;
    Tensor<T>& v = state.v.at(name);
    if (!m.same_shape(p.value)) {
      throw ShapeError("adam_step: state shape " + m.shape_str() + " vs param " +
                       p.value.shape_str() + " for " + name);
    }
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]);
      const double mi = beta1 * static_cast<double>(m.data[i]) + (1.0 - beta1) * g;
      const double vi = beta2 * static_cast<double>(v.data[i]) + (1.0 - beta2) * g * g;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.value.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
    }
    p.zero_grad();
  }
}

}  // namespace flowdet
