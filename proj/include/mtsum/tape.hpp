#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtsum/params.hpp"
#include "mtsum/rng.hpp"
#include "mtsum/tensor.hpp"

namespace mtsum {

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = static_cast<T>(std::exp(-static_cast<double>(x)));
    return T(1) / (T(1) + e);
  }
  const T e = static_cast<T>(std::exp(static_cast<double>(x)));
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return static_cast<T>(std::exp(static_cast<double>(x)));
  return static_cast<T>(std::log1p(std::exp(static_cast<double>(x))));
}

// Reverse-mode tape. Every op computes its value eagerly and, while recording,
// registers an analytic backward closure. backward(loss) walks the closures in
// reverse creation order and finally flushes parameter-node adjoints into the
// bound ParamStore gradients (accumulating, so gradient accumulation across
// documents falls out of not zeroing the store).
template <typename T>
class Tape {
 public:
  struct Value {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  // test hook: factor-2 bug injected into affine's weight-gradient rule
  bool corrupt_affine_backward = false;

  Value constant(Tensor<T> v) { return push(std::move(v), false); }

  Value param(const std::string& name, ParamStore<T>& store) {
    auto& entry = store.at(name);
    auto it = param_nodes_.find(&entry);
    if (it != param_nodes_.end()) return Value{it->second};
    Value v = push(entry.value, recording_);
    param_nodes_[&entry] = v.id;
    if (recording_) bound_params_.push_back({&entry, v.id});
    return v;
  }

  const Tensor<T>& val(Value v) const { return nodes_[v.id].value; }
  const Tensor<T>& grad(Value v) const { return nodes_[v.id].grad; }
  Tensor<T>& grad_ref(std::size_t id) { return nodes_[id].grad; }
  const Tensor<T>& val_ref(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Value v) const { return nodes_[v.id].needs_grad; }

  // generic extension point: modules with fused kernels (the selective scan)
  // push their own node with a hand-derived backward
  Value push_node(Tensor<T> value, const std::vector<Value>& parents,
                  std::function<void(Tape&, std::size_t)> back) {
    bool ng = false;
    for (auto p : parents) ng = ng || nodes_[p.id].needs_grad;
    Value v = push(std::move(value), ng && recording_);
    if (recording_ && nodes_[v.id].needs_grad) nodes_[v.id].back = std::move(back);
    return v;
  }

  // ---- elementwise ----

  Value add(Value a, Value b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const auto& bv = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return unary_binary(std::move(out), a, b, [](Tape& t, std::size_t self, std::size_t ia, std::size_t ib) {
      const auto& g = t.nodes_[self].grad;
      if (t.needs_grad(ia)) {
        auto& ga = t.grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs_grad(ib)) {
        auto& gb = t.grad_ref(ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }

  Value mul(Value a, Value b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const auto& bv = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return unary_binary(std::move(out), a, b, [](Tape& t, std::size_t self, std::size_t ia, std::size_t ib) {
      const auto& g = t.nodes_[self].grad;
      const auto& av = t.val_ref(ia);
      const auto& bv2 = t.val_ref(ib);
      if (t.needs_grad(ia)) {
        auto& ga = t.grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (t.needs_grad(ib)) {
        auto& gb = t.grad_ref(ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }

  Value scale(Value a, T s) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x *= s;
    return unary(std::move(out), a, [s](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }

  enum class Act { sigmoid, softplus, silu, gelu, relu };

  Value activation(Value a, Act kind) {
    const auto& x = val(a);
    Tensor<T> out;
    out.shape = x.shape;
    out.data.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = act_forward(x[i], kind);
    return unary(std::move(out), a, [kind](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      const auto& x2 = t.val_ref(ia);
      const auto& y = t.nodes_[self].value;
      auto& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * act_backward(x2[i], y[i], kind);
    });
  }

  Value sigmoid(Value a) { return activation(a, Act::sigmoid); }
  Value softplus(Value a) { return activation(a, Act::softplus); }
  Value silu(Value a) { return activation(a, Act::silu); }
  Value gelu(Value a) { return activation(a, Act::gelu); }
  Value relu(Value a) { return activation(a, Act::relu); }

  // y = -exp(x); the SSM state matrix A = -exp(A_log)
  Value neg_exp(Value a) {
    const auto& x = val(a);
    Tensor<T> out;
    out.shape = x.shape;
    out.data.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = -static_cast<T>(std::exp(static_cast<double>(x[i])));
    return unary(std::move(out), a, [](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      const auto& y = t.nodes_[self].value;
      auto& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }

  // ---- linear algebra ----

  Value matmul(Value a, Value b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.rows())
      throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    Tensor<T> out = Tensor<T>::zeros({av.rows(), bv.cols()});
    mm(av, bv, out);
    return unary_binary(std::move(out), a, b, [](Tape& t, std::size_t self, std::size_t ia, std::size_t ib) {
      const auto& g = t.nodes_[self].grad;
      const auto& av2 = t.val_ref(ia);
      const auto& bv2 = t.val_ref(ib);
      if (t.needs_grad(ia)) mm_nt_acc(g, bv2, t.grad_ref(ia));   // dA += g * B^T
      if (t.needs_grad(ib)) mm_tn_acc(av2, g, t.grad_ref(ib));   // dB += A^T * g
    });
  }

  // a (m x k) * b^T (k x n) where b is (n x k)
  Value matmul_nt(Value a, Value b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.cols())
      throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    Tensor<T> out = Tensor<T>::zeros({av.rows(), bv.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < bv.rows(); ++j) {
        T s = T(0);
        for (std::size_t k = 0; k < av.cols(); ++k) s += av(i, k) * bv(j, k);
        out(i, j) = s;
      }
    return unary_binary(std::move(out), a, b, [](Tape& t, std::size_t self, std::size_t ia, std::size_t ib) {
      const auto& g = t.nodes_[self].grad;
      const auto& av2 = t.val_ref(ia);
      const auto& bv2 = t.val_ref(ib);
      if (t.needs_grad(ia)) mm_acc(g, bv2, t.grad_ref(ia));      // dA += g * B
      if (t.needs_grad(ib)) mm_tn_acc(g, av2, t.grad_ref(ib));   // dB += g^T * A
    });
  }

  Value affine(Value x, Value w, Value b) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    const auto& bv = val(b);
    if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.cols() != wv.rows() || bv.size() != wv.cols())
      throw std::invalid_argument("affine: incompatible shapes x" + shape_str(xv.shape) + " W" +
                                  shape_str(wv.shape) + " b" + shape_str(bv.shape));
    Tensor<T> out = Tensor<T>::zeros({xv.rows(), wv.cols()});
    mm(xv, wv, out);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
    std::vector<Value> parents{x, w, b};
    const std::size_t ix = x.id, iw = w.id, ib = b.id;
    return push_node(std::move(out), parents, [ix, iw, ib](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      const auto& xv2 = t.val_ref(ix);
      const auto& wv2 = t.val_ref(iw);
      if (t.needs_grad(ix)) mm_nt_acc(g, wv2, t.grad_ref(ix));
      if (t.needs_grad(iw)) {
        if (t.corrupt_affine_backward) {
          Tensor<T> tmp = Tensor<T>::zeros(t.grad_ref(iw).shape);
          mm_tn_acc(xv2, g, tmp);
          auto& gw = t.grad_ref(iw);
          for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += T(2) * tmp[i];
        } else {
          mm_tn_acc(xv2, g, t.grad_ref(iw));
        }
      }
      if (t.needs_grad(ib)) {
        auto& gb = t.grad_ref(ib);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
      }
    });
  }

  // ---- shape ops ----

  Value slice_cols(Value a, std::size_t start, std::size_t len) {
    const auto& av = val(a);
    if (av.shape.size() != 2 || start + len > av.cols())
      throw std::invalid_argument("slice_cols: range out of bounds for " + shape_str(av.shape));
    Tensor<T> out = Tensor<T>::zeros({av.rows(), len});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < len; ++j) out(i, j) = av(i, start + j);
    return unary(std::move(out), a, [start, len](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.grad_ref(ia);
      const std::size_t cols = t.val_ref(ia).cols();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < len; ++j) ga.data[i * cols + start + j] += g(i, j);
    });
  }

  Value slice_rows(Value a, std::size_t start, std::size_t len) {
    const auto& av = val(a);
    if (av.shape.size() != 2 || start + len > av.rows())
      throw std::invalid_argument("slice_rows: range out of bounds for " + shape_str(av.shape));
    Tensor<T> out = Tensor<T>::zeros({len, av.cols()});
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = av(start + i, j);
    return unary(std::move(out), a, [start, len](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.grad_ref(ia);
      const std::size_t cols = t.val_ref(ia).cols();
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < cols; ++j) ga.data[(start + i) * cols + j] += g(i, j);
    });
  }

  Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t rows = val(parts[0]).rows();
    std::size_t cols = 0;
    for (auto p : parts) {
      if (val(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += val(p).cols();
    }
    Tensor<T> out = Tensor<T>::zeros({rows, cols});
    std::size_t off = 0;
    for (auto p : parts) {
      const auto& pv = val(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
      off += pv.cols();
    }
    std::vector<std::size_t> ids;
    for (auto p : parts) ids.push_back(p.id);
    return push_node(std::move(out), parts, [ids](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      std::size_t off2 = 0;
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        const std::size_t c = t.val_ref(ids[pi]).cols();
        if (t.needs_grad(ids[pi])) {
          auto& gp = t.grad_ref(ids[pi]);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off2 + j);
        }
        off2 += c;
      }
    });
  }

  Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t cols = val(parts[0]).cols();
    std::size_t rows = 0;
    for (auto p : parts) {
      if (val(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += val(p).rows();
    }
    Tensor<T> out = Tensor<T>::zeros({rows, cols});
    std::size_t off = 0;
    for (auto p : parts) {
      const auto& pv = val(p);
      for (std::size_t i = 0; i < pv.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) out(off + i, j) = pv(i, j);
      off += pv.rows();
    }
    std::vector<std::size_t> ids;
    for (auto p : parts) ids.push_back(p.id);
    return push_node(std::move(out), parts, [ids](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      std::size_t off2 = 0;
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        const std::size_t r = t.val_ref(ids[pi]).rows();
        if (t.needs_grad(ids[pi])) {
          auto& gp = t.grad_ref(ids[pi]);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gp(i, j) += g(off2 + i, j);
        }
        off2 += r;
      }
    });
  }

  // ---- normalization / softmax ----

  Value layer_norm(Value x, Value gamma, Value beta, T eps = T(1e-5)) {
    const auto& xv = val(x);
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    if (xv.shape.size() != 2 || gv.size() != xv.cols() || bv.size() != xv.cols())
      throw std::invalid_argument("layer_norm: incompatible shapes x" + shape_str(xv.shape) + " gamma" +
                                  shape_str(gv.shape));
    const std::size_t n = xv.cols();
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    Tensor<T> xhat = Tensor<T>::zeros(xv.shape);
    Tensor<T> rstd = Tensor<T>::zeros({xv.rows()});
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      T mu = T(0);
      for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
      mu /= static_cast<T>(n);
      T var = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T d = xv(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<T>(n);
      const T r = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
      rstd[i] = r;
      for (std::size_t j = 0; j < n; ++j) {
        xhat(i, j) = (xv(i, j) - mu) * r;
        out(i, j) = gv[j] * xhat(i, j) + bv[j];
      }
    }
    std::vector<Value> parents{x, gamma, beta};
    const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
    auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
    auto rs = std::make_shared<Tensor<T>>(std::move(rstd));
    return push_node(std::move(out), parents, [ix, ig, ib, xh, rs, n](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      const auto& gv2 = t.val_ref(ig);
      if (t.needs_grad(ig)) {
        auto& gg = t.grad_ref(ig);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g(i, j) * (*xh)(i, j);
      }
      if (t.needs_grad(ib)) {
        auto& gb = t.grad_ref(ib);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
      }
      if (t.needs_grad(ix)) {
        auto& gx = t.grad_ref(ix);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxh = g(i, j) * gv2[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * (*xh)(i, j);
          }
          mean_dxhat /= static_cast<T>(n);
          mean_dxhat_xhat /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxh = g(i, j) * gv2[j];
            gx(i, j) += (*rs)[i] * (dxh - mean_dxhat - (*xh)(i, j) * mean_dxhat_xhat);
          }
        }
      }
    });
  }

  Value rms_norm(Value x, Value weight, T eps = T(1e-6)) {
    const auto& xv = val(x);
    const auto& wv = val(weight);
    if (xv.shape.size() != 2 || wv.size() != xv.cols())
      throw std::invalid_argument("rms_norm: incompatible shapes x" + shape_str(xv.shape) + " w" +
                                  shape_str(wv.shape));
    const std::size_t n = xv.cols();
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    Tensor<T> rinv = Tensor<T>::zeros({xv.rows()});
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      T ms = T(0);
      for (std::size_t j = 0; j < n; ++j) ms += xv(i, j) * xv(i, j);
      ms /= static_cast<T>(n);
      const T r = T(1) / static_cast<T>(std::sqrt(static_cast<double>(ms + eps)));
      rinv[i] = r;
      for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) * r * wv[j];
    }
    std::vector<Value> parents{x, weight};
    const std::size_t ix = x.id, iw = weight.id;
    auto rs = std::make_shared<Tensor<T>>(std::move(rinv));
    return push_node(std::move(out), parents, [ix, iw, rs, n](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      const auto& xv2 = t.val_ref(ix);
      const auto& wv2 = t.val_ref(iw);
      if (t.needs_grad(iw)) {
        auto& gw = t.grad_ref(iw);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < n; ++j) gw[j] += g(i, j) * xv2(i, j) * (*rs)[i];
      }
      if (t.needs_grad(ix)) {
        auto& gx = t.grad_ref(ix);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const T r = (*rs)[i];
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * wv2[j] * xv2(i, j);
          const T c = dot * r * r * r / static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) gx(i, j) += g(i, j) * wv2[j] * r - xv2(i, j) * c;
        }
      }
    });
  }

  Value softmax_rows(Value x) {
    const auto& xv = val(x);
    if (xv.shape.size() != 2) throw std::invalid_argument("softmax: expected 2d input, got " + shape_str(xv.shape));
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      T mx = xv(i, 0);
      for (std::size_t j = 1; j < xv.cols(); ++j) mx = std::max(mx, xv(i, j));
      T sum = T(0);
      for (std::size_t j = 0; j < xv.cols(); ++j) {
        out(i, j) = static_cast<T>(std::exp(static_cast<double>(xv(i, j) - mx)));
        sum += out(i, j);
      }
      for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) /= sum;
    }
    return unary(std::move(out), x, [](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      const auto& y = t.nodes_[self].value;
      auto& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
      }
    });
  }

  // ---- depthwise causal conv, x: L x C, kernels: C x K, left pad K-1 ----

  Value causal_dw_conv1d(Value x, Value kernels) {
    const auto& xv = val(x);
    const auto& kv = val(kernels);
    if (xv.shape.size() != 2 || kv.shape.size() != 2 || xv.cols() != kv.rows())
      throw std::invalid_argument("causal_dw_conv1d: incompatible shapes x" + shape_str(xv.shape) + " k" +
                                  shape_str(kv.shape));
    const std::size_t L = xv.rows(), C = xv.cols(), K = kv.cols();
    Tensor<T> out = Tensor<T>::zeros(xv.shape);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        T s = T(0);
        for (std::size_t j = 0; j < K; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(K - 1 - j);
          if (src >= 0) s += kv(c, j) * xv(static_cast<std::size_t>(src), c);
        }
        out(t, c) = s;
      }
    return unary_binary(std::move(out), x, kernels,
                        [L, C, K](Tape& t, std::size_t self, std::size_t ix, std::size_t ik) {
      const auto& g = t.nodes_[self].grad;
      const auto& xv2 = t.val_ref(ix);
      const auto& kv2 = t.val_ref(ik);
      for (std::size_t tt = 0; tt < L; ++tt)
        for (std::size_t c = 0; c < C; ++c) {
          const T gy = g(tt, c);
          if (gy == T(0)) continue;
          for (std::size_t j = 0; j < K; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(tt) - static_cast<std::ptrdiff_t>(K - 1 - j);
            if (src < 0) continue;
            if (t.needs_grad(ix)) t.grad_ref(ix)(static_cast<std::size_t>(src), c) += gy * kv2(c, j);
            if (t.needs_grad(ik)) t.grad_ref(ik)(c, j) += gy * xv2(static_cast<std::size_t>(src), c);
          }
        }
    });
  }

  // ---- embedding gather, table: V x d, ids constant ----

  Value embedding(Value table, const std::vector<std::size_t>& ids) {
    const auto& tv = val(table);
    if (tv.shape.size() != 2) throw std::invalid_argument("embedding: table must be 2d");
    for (auto id : ids)
      if (id >= tv.rows())
        throw std::invalid_argument("embedding: token id " + std::to_string(id) + " >= vocab size " +
                                    std::to_string(tv.rows()));
    Tensor<T> out = Tensor<T>::zeros({ids.size(), tv.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < tv.cols(); ++j) out(i, j) = tv(ids[i], j);
    auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids);
    return unary(std::move(out), table, [ids_copy](Tape& t, std::size_t self, std::size_t it) {
      const auto& g = t.nodes_[self].grad;
      auto& gt = t.grad_ref(it);
      for (std::size_t i = 0; i < ids_copy->size(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gt((*ids_copy)[i], j) += g(i, j);
    });
  }

  // ---- dropout ----

  Value dropout(Value x, T p, Rng& rng, bool training) {
    if (p < T(0) || p >= T(1)) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == T(0)) return x;  // inference: exact identity
    const auto& xv = val(x);
    const T keep = T(1) - p;
    auto mask = std::make_shared<std::vector<T>>(xv.size());
    Tensor<T> out;
    out.shape = xv.shape;
    out.data.resize(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const bool alive = rng.uniform() >= static_cast<double>(p);
      (*mask)[i] = alive ? T(1) / keep : T(0);
      out[i] = xv[i] * (*mask)[i];
    }
    return unary(std::move(out), x, [mask](Tape& t, std::size_t self, std::size_t ia) {
      const auto& g = t.nodes_[self].grad;
      auto& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    });
  }

  // ---- losses ----

  // mean over positions of -[y ln p + (1-y) ln(1-p)], probs clamped to [eps, 1-eps]
  Value bce_mean(Value probs, const Tensor<T>& labels, T eps = T(1e-7)) {
    const auto& pv = val(probs);
    if (pv.size() != labels.size())
      throw std::invalid_argument("bce: probs/labels length mismatch " + std::to_string(pv.size()) + " vs " +
                                  std::to_string(labels.size()));
    if (pv.size() == 0) throw std::invalid_argument("bce: empty input");
    const std::size_t n = pv.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = clamp01(static_cast<double>(pv[i]), static_cast<double>(eps));
      const double y = static_cast<double>(labels[i]);
      loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    loss /= static_cast<double>(n);
    auto lab = std::make_shared<Tensor<T>>(labels);
    return unary(Tensor<T>::scalar(static_cast<T>(loss)), probs, [lab, eps, n](Tape& t, std::size_t self, std::size_t ip) {
      const T g = t.nodes_[self].grad[0];
      const auto& pv2 = t.val_ref(ip);
      auto& gp = t.grad_ref(ip);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = static_cast<double>(pv2[i]);
        const double e = static_cast<double>(eps);
        if (p < e || p > 1.0 - e) continue;  // clamp region: zero slope
        const double y = static_cast<double>((*lab)[i]);
        gp[i] += g * static_cast<T>((-y / p + (1.0 - y) / (1.0 - p)) / static_cast<double>(n));
      }
    });
  }

  // ---- backward ----

  void backward(Value loss) {
    if (!recording_) throw std::logic_error("tape: backward on a non-recording tape");
    if (val(loss).size() != 1) throw std::invalid_argument("tape: backward needs a scalar loss");
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.needs_grad && n.back) n.back(*this, i);
    }
    for (auto& [entry, id] : bound_params_) {
      const auto& g = nodes_[id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) entry->grad[i] += g[i];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&, std::size_t)> back;
  };

  static double clamp01(double p, double eps) { return p < eps ? eps : (p > 1.0 - eps ? 1.0 - eps : p); }

  static T act_forward(T x, Act kind) {
    switch (kind) {
      case Act::sigmoid: return stable_sigmoid(x);
      case Act::softplus: return stable_softplus(x);
      case Act::silu: return x * stable_sigmoid(x);
      case Act::gelu: {
        const double xd = static_cast<double>(x);
        return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * 0.70710678118654752440)));
      }
      case Act::relu: return x > T(0) ? x : T(0);
    }
    return T(0);
  }

  static T act_backward(T x, T y, Act kind) {
    switch (kind) {
      case Act::sigmoid: return y * (T(1) - y);
      case Act::softplus: return stable_sigmoid(x);
      case Act::silu: {
        const T s = stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      }
      case Act::gelu: {
        const double xd = static_cast<double>(x);
        const double phi = std::exp(-0.5 * xd * xd) * 0.39894228040143267794;
        const double Phi = 0.5 * (1.0 + std::erf(xd * 0.70710678118654752440));
        return static_cast<T>(Phi + xd * phi);
      }
      case Act::relu: return x > T(0) ? T(1) : T(0);
    }
    return T(0);
  }

  Value push(Tensor<T> v, bool needs_grad) {
    Node n;
    n.needs_grad = needs_grad && recording_;
    if (n.needs_grad) n.grad = Tensor<T>::zeros(v.shape);
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Value{nodes_.size() - 1};
  }

  Value unary(Tensor<T> out, Value a, std::function<void(Tape&, std::size_t, std::size_t)> back) {
    const std::size_t ia = a.id;
    return push_node(std::move(out), {a}, [ia, back = std::move(back)](Tape& t, std::size_t self) {
      if (t.needs_grad(ia)) back(t, self, ia);
    });
  }

  Value unary_binary(Tensor<T> out, Value a, Value b,
                     std::function<void(Tape&, std::size_t, std::size_t, std::size_t)> back) {
    const std::size_t ia = a.id, ib = b.id;
    return push_node(std::move(out), {a, b},
                     [ia, ib, back = std::move(back)](Tape& t, std::size_t self) { back(t, self, ia, ib); });
  }

  void check_same(Value a, Value b, const char* op) {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                                  shape_str(val(b).shape));
  }

  static void mm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a(i, p);
        if (av == T(0)) continue;
        for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
      }
  }

  // out += a * b
  static void mm_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) { mm(a, b, out); }

  // out += a * b^T
  static void mm_nt_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T s = T(0);
        for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
        out(i, j) += s;
      }
  }

  // out += a^T * b
  static void mm_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a(p, i);
        if (av == T(0)) continue;
        for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
      }
  }

  std::vector<Node> nodes_;
  bool recording_;
  std::unordered_map<const void*, std::size_t> param_nodes_;
  std::vector<std::pair<typename ParamStore<T>::Entry*, std::size_t>> bound_params_;
};

}  // namespace mtsum
