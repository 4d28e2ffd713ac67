#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtsum {

// Dense row-major tensor. float for training, double for gradient checks.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) throw std::invalid_argument("tensor: data length does not match shape");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    Tensor t;
    t.data.assign(count(s), T(0));
    t.shape = std::move(s);
    return t;
  }

  static Tensor full(std::vector<std::size_t> s, T v) {
    Tensor t;
    t.data.assign(count(s), v);
    t.shape = std::move(s);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  std::size_t rows() const {
    if (shape.size() != 2) throw std::invalid_argument("tensor: rows() on non-2d tensor");
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.size() != 2) throw std::invalid_argument("tensor: cols() on non-2d tensor");
    return shape[1];
  }

  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }

  // 2-d access
  T& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  // 3-d access
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
  Tensor<To> out;
  out.shape = a.shape;
  out.data.reserve(a.data.size());
  for (From v : a.data) out.data.push_back(static_cast<To>(v));
  return out;
}

}  // namespace mtsum
