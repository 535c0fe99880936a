#pragma once

#include <algorithm>
#include <map>
#include <utility>
#include <vector>

#include "flowdet/tensor.hpp"

namespace flowdet {

// Widths of the hidden/output layers of an MLP. All layers are ReLU unless
// final_linear is set, in which case the last layer has no activation.
struct MlpSpec {
  std::vector<int> widths;
  bool final_linear = false;
};

// y = x * w + b, row-wise. x: [B x Din], w: [Din x Dout], b: [Dout].
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.cols() != w.rows() || w.cols() != static_cast<int>(b.data.size())) {
    throw ShapeError("linear_forward: x " + x.shape_str() + " w " + w.shape_str() + " b " +
                     b.shape_str());
  }
  const int B = x.rows(), Din = x.cols(), Dout = w.cols();
  Tensor<T> y = Tensor<T>::zeros({B, Dout});
  for (int i = 0; i < B; ++i) {
    for (int k = 0; k < Din; ++k) {
      const T xv = x(i, k);
      if (xv == T(0)) continue;
      for (int j = 0; j < Dout; ++j) y(i, j) += xv * w(k, j);
    }
    for (int j = 0; j < Dout; ++j) y(i, j) += b(j);
  }
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols()) {
    throw ShapeError("linear_backward: dy " + dy.shape_str() + " vs x " + x.shape_str() + " w " +
                     w.shape_str());
  }
  const int B = x.rows(), Din = x.cols(), Dout = w.cols();
  LinearGrads<T> g{Tensor<T>::zeros({B, Din}), Tensor<T>::zeros({Din, Dout}),
                   Tensor<T>::zeros({Dout})};
  for (int i = 0; i < B; ++i) {
    for (int j = 0; j < Dout; ++j) {
      const T d = dy(i, j);
      if (d == T(0)) continue;
      g.db(j) += d;
      for (int k = 0; k < Din; ++k) {
        g.dx(i, k) += d * w(k, j);
        g.dw(k, j) += d * x(i, k);
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) v = std::max(v, T(0));
  return y;
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x, dy, "relu_backward");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i) {
    if (x.data[i] <= T(0)) dx.data[i] = T(0);
  }
  return dx;
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> values;         // [D]
  std::vector<int> argmax;  // row index per column, ties break to lowest row
};

// Columnwise max over the rows of x: [K x D] -> [D].
template <typename T>
MaxPoolResult<T> max_pool_rows(const Tensor<T>& x) {
  const int K = x.rows(), D = x.cols();
  if (K == 0) throw ShapeError("max_pool_rows: empty group");
  MaxPoolResult<T> r{Tensor<T>::zeros({D}), std::vector<int>(D, 0)};
  for (int j = 0; j < D; ++j) {
    T best = x(0, j);
    int arg = 0;
    for (int i = 1; i < K; ++i) {
      if (x(i, j) > best) {
        best = x(i, j);
        arg = i;
      }
    }
    r.values(j) = best;
    r.argmax[j] = arg;
  }
  return r;
}

// Routes dy only to the argmax rows.
template <typename T>
Tensor<T> max_pool_rows_backward(const std::vector<int>& argmax, int K, const Tensor<T>& dy) {
  const int D = static_cast<int>(argmax.size());
  if (dy.numel() != D) {
    throw ShapeError("max_pool_rows_backward: dy " + dy.shape_str() + " vs D=" +
                     std::to_string(D));
  }
  Tensor<T> dx = Tensor<T>::zeros({K, D});
  for (int j = 0; j < D; ++j) dx(argmax[j], j) = dy(j);
  return dx;
}

// Named parameter collection; std::map keeps iteration order deterministic.
template <typename T>
using ParamMap = std::map<std::string, Parameter<T>>;

template <typename T>
Parameter<T>& param_at(ParamMap<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

// Shared-weight MLP applied to the rows of a matrix, with cached activations
// for the hand-written backward pass.
template <typename T>
struct MlpCache {
  std::vector<Tensor<T>> inputs;  // input of each layer (post-activation of previous)
  std::vector<Tensor<T>> pre;     // pre-activation output of each layer
};

// Registers parameters "<prefix>.<i>.w" / "<prefix>.<i>.b" for each layer.
template <typename T>
void mlp_init(ParamMap<T>& params, const std::string& prefix, int in_dim, const MlpSpec& spec,
              std::mt19937_64& rng) {
  if (spec.widths.empty()) throw ConfigError("mlp_init: " + prefix + " has no layers");
  int d = in_dim;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const int out = spec.widths[i];
    const double std = std::sqrt(2.0 / static_cast<double>(d));
    const std::string base = prefix + "." + std::to_string(i);
    params.emplace(base + ".w", Parameter<T>(base + ".w", randn<T>({d, out}, rng, std)));
    params.emplace(base + ".b", Parameter<T>(base + ".b", Tensor<T>::zeros({out})));
    d = out;
  }
}

template <typename T>
Tensor<T> mlp_forward(ParamMap<T>& params, const std::string& prefix, const MlpSpec& spec,
                      const Tensor<T>& x, MlpCache<T>* cache = nullptr) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    const auto& w = param_at(params, base + ".w").value;
    const auto& b = param_at(params, base + ".b").value;
    Tensor<T> pre = linear_forward(h, w, b);
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(pre);
    }
    const bool last = (i + 1 == spec.widths.size());
    h = (last && spec.final_linear) ? pre : relu_forward(pre);
  }
  return h;
}

// Accumulates dw/db into the parameter grads and returns d_input.
template <typename T>
Tensor<T> mlp_backward(ParamMap<T>& params, const std::string& prefix, const MlpSpec& spec,
                       const MlpCache<T>& cache, const Tensor<T>& dy) {
  Tensor<T> d = dy;
  for (int i = static_cast<int>(spec.widths.size()) - 1; i >= 0; --i) {
    const std::string base = prefix + "." + std::to_string(i);
    const bool last = (i + 1 == static_cast<int>(spec.widths.size()));
    if (!(last && spec.final_linear)) d = relu_backward(cache.pre[i], d);
    auto& wp = param_at(params, base + ".w");
    auto& bp = param_at(params, base + ".b");
    LinearGrads<T> g = linear_backward(cache.inputs[i], wp.value, d);
    for (std::size_t k = 0; k < g.dw.data.size(); ++k) wp.grad.data[k] += g.dw.data[k];
    for (std::size_t k = 0; k < g.db.data.size(); ++k) bp.grad.data[k] += g.db.data[k];
    d = std::move(g.dx);
  }
  return d;
}

}  // namespace flowdet
