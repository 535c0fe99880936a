#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flowdet/errors.hpp"

namespace flowdet {

// Dense row-major tensor. Rank is dynamic but in practice 1, 2 or 3.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel()) != data.size()) {
      throw ShapeError("Tensor: shape " + shape_str() + " does not match data length " +
                       std::to_string(data.size()));
    }
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(t.numel()), T(0));
    return t;
  }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int numel() const {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e < 0) throw ShapeError("Tensor: negative extent in " + shape_str());
      n *= e;
    }
    return static_cast<int>(n);
  }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  T operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols() + j]; }
  T operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols() + j]; }
  // Rank-3 access, shape [A, B, C].
  T& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (T v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }
};

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

template <typename T>
inline void require_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite values");
}

// A learnable tensor with a gradient slot of the same shape.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  std::string name;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : value(std::move(v)), grad(Tensor<T>::zeros(value.shape)), name(std::move(n)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

// Gaussian fill used by parameter initialization; deterministic per engine state.
template <typename T>
inline Tensor<T> randn(std::vector<int> shape, std::mt19937_64& rng, double stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
inline Tensor<T> uniform(std::vector<int> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace flowdet
