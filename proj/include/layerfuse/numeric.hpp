#pragma once

// Dense numeric kernel shared by every learnable component: affine maps,
// ReLU, softmax cross-entropy, Adam and a central-difference gradient oracle.
//
// Everything is templated on the scalar type. Training instantiates `float`;
// the gradient-check suites instantiate `double`.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerfuse/random.hpp"

namespace layerfuse {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Affine map parameters: row-major `weight` (d_out x d_in) and `bias` (d_out).
template <typename T>
struct DenseParams {
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  DenseParams() = default;
  DenseParams(std::size_t out, std::size_t in)
      : d_out(out), d_in(in), weight(out * in, T{0}), bias(out, T{0}) {}

  T& at(std::size_t r, std::size_t c) { return weight[r * d_in + c]; }
  T at(std::size_t r, std::size_t c) const { return weight[r * d_in + c]; }

  std::size_t size() const { return weight.size() + bias.size(); }

  void zero() {
    std::fill(weight.begin(), weight.end(), T{0});
    std::fill(bias.begin(), bias.end(), T{0});
  }

  bool finite() const {
    auto ok = [](T v) { return std::isfinite(v); };
    return std::all_of(weight.begin(), weight.end(), ok) && std::all_of(bias.begin(), bias.end(), ok);
  }

  template <typename U>
  DenseParams<U> cast() const {
    DenseParams<U> out(d_out, d_in);
    std::transform(weight.begin(), weight.end(), out.weight.begin(), [](T v) { return static_cast<U>(v); });
    std::transform(bias.begin(), bias.end(), out.bias.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const DenseParams&) const = default;
};

/// Glorot-uniform weights in [-sqrt(6/(d_in+d_out)), +sqrt(6/(d_in+d_out))], zero bias.
template <typename T>
void init_uniform(DenseParams<T>& p, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(p.d_in + p.d_out));
  for (auto& w : p.weight) w = static_cast<T>(rng.uniform(-bound, bound));
  std::fill(p.bias.begin(), p.bias.end(), T{0});
}

/// y = W x + b, written into `y` (size d_out).
template <typename T>
void linear_forward(std::span<const T> x, const DenseParams<T>& p, std::span<T> y) {
  if (x.size() != p.d_in || y.size() != p.d_out) {
    throw ShapeError("linear_forward: expected input " + std::to_string(p.d_in) + " / output " +
                     std::to_string(p.d_out) + ", got " + std::to_string(x.size()) + " / " +
                     std::to_string(y.size()));
  }
  const T* w = p.weight.data();
  for (std::size_t r = 0; r < p.d_out; ++r, w += p.d_in) {
    T acc = p.bias[r];
    for (std::size_t c = 0; c < p.d_in; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

template <typename T>
std::vector<T> linear_forward(std::span<const T> x, const DenseParams<T>& p) {
  std::vector<T> y(p.d_out);
  linear_forward<T>(x, p, y);
  return y;
}

/// Accumulates dW += dy x^T and db += dy into `grad`. If `dx` is non-empty it
/// receives W^T dy (overwritten, not accumulated).
template <typename T>
void linear_backward(std::span<const T> x, const DenseParams<T>& p, std::span<const T> dy,
                     DenseParams<T>& grad, std::span<T> dx) {
  if (x.size() != p.d_in || dy.size() != p.d_out || grad.d_in != p.d_in || grad.d_out != p.d_out) {
    throw ShapeError("linear_backward: shape mismatch");
  }
  if (!dx.empty()) {
    if (dx.size() != p.d_in) throw ShapeError("linear_backward: dx has wrong size");
    std::fill(dx.begin(), dx.end(), T{0});
  }
  const T* w = p.weight.data();
  T* gw = grad.weight.data();
  for (std::size_t r = 0; r < p.d_out; ++r, w += p.d_in, gw += p.d_in) {
    const T g = dy[r];
    grad.bias[r] += g;
    if (g == T{0}) continue;
    for (std::size_t c = 0; c < p.d_in; ++c) gw[c] += g * x[c];
    if (!dx.empty()) {
      for (std::size_t c = 0; c < p.d_in; ++c) dx[c] += w[c] * g;
    }
  }
}

template <typename T>
std::vector<T> relu(std::span<const T> x) {
  std::vector<T> y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), [](T v) { return v > T{0} ? v : T{0}; });
  return y;
}

template <typename T>
void relu_inplace(std::span<T> x) {
  for (auto& v : x) v = v > T{0} ? v : T{0};
}

/// dx = dy where pre > 0, else 0. Written in place over `dy`.
template <typename T>
void relu_backward_inplace(std::span<const T> pre, std::span<T> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(pre[i] > T{0})) dy[i] = T{0};
  }
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.size());
  if (logits.empty()) return p;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
struct LossAndGrad {
  T loss;
  std::vector<T> grad;
};

/// Loss -log softmax(logits)[label] with max-subtraction; gradient softmax - onehot.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(std::span<const T> logits, std::size_t label) {
  if (logits.size() < 2) throw ShapeError("softmax_cross_entropy: need at least 2 classes");
  if (label >= logits.size()) {
    throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (T z : logits) sum += std::exp(z - mx);
  const T log_z = mx + std::log(sum);

  LossAndGrad<T> out{log_z - logits[label], std::vector<T>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[label] -= T{1};
  return out;
}

/// Index of the largest element; ties resolve to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Adam optimizer state over a flat concatenation of parameter tensors.
template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t t = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamState&) const = default;
};

/// One Adam step with bias correction over several tensors that share a step
/// counter. Moment buffers are sized lazily on the first call.
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               AdamState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  std::size_t total = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw ShapeError("adam_step: tensor size mismatch");
    total += params[k].size();
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(total, T{0});
    state.v.assign(total, T{0});
  }
  if (state.m.size() != total || state.v.size() != total) throw ShapeError("adam_step: state size mismatch");

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(state.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(state.eps);

  std::size_t off = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::span<T> theta = params[k];
    std::span<const T> g = grads[k];
    T* m = state.m.data() + off;
    T* v = state.v.data() + off;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      theta[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
    off += theta.size();
  }
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state) {
  const std::span<T> p[1] = {params};
  const std::span<const T> g[1] = {grads};
  adam_step<T>(std::span<const std::span<T>>(p), std::span<const std::span<const T>>(g), state);
}

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps);

/// ||a - b|| / max(||a||, ||b||), or 0 when both are exactly zero.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace layerfuse
