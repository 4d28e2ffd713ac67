#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtsum/tensor.hpp"

namespace mtsum {

// Named parameter tensors with matching gradient accumulators.
// Iteration order is insertion order; checkpoints and the optimizer rely on it.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
  };

  Entry& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("param store: duplicate parameter " + name);
    index_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.grad = Tensor<T>::zeros(value.shape);
    e.value = std::move(value);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    return entries_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("param store: unknown parameter " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grads() {
    for (auto& e : entries_) e.grad.fill(T(0));
  }

  void scale_grads(T s) {
    for (auto& e : entries_)
      for (auto& g : e.grad.data) g *= s;
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& e : entries_) out.add(e.name, tensor_cast<To>(e.value), e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Global-norm gradient clipping over the trainable entries. Returns the scale
// that was applied (1 when the norm is already within bound or all-zero).
template <typename T>
T clip_global_norm(ParamStore<T>& params, T max_norm) {
  if (!(max_norm > T(0))) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    for (T g : e.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm <= static_cast<double>(max_norm) || norm == 0.0) return T(1);
  const T scale = static_cast<T>(static_cast<double>(max_norm) / norm);
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    for (auto& g : e.grad.data) g *= scale;
  }
  return scale;
}

// Adam first/second moments, one pair per trainable parameter, keyed by the
// store's insertion order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamState init(const ParamStore<T>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& e : params.entries()) {
      s.m.push_back(Tensor<T>::zeros(e.value.shape));
      s.v.push_back(Tensor<T>::zeros(e.value.shape));
    }
    return s;
  }
};

template <typename T>
struct AdamConfig {
  T lr = T(1e-5);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const AdamConfig<T>& cfg) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match param store");
  state.t += 1;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& e = params.entries()[i];
    if (!e.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < e.value.size(); ++j) {
      const T g = e.grad[j];
      m[j] = cfg.beta1 * m[j] + (T(1) - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (T(1) - cfg.beta2) * g * g;
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      e.value[j] -= cfg.lr * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + cfg.eps);
    }
  }
}

}  // namespace mtsum
