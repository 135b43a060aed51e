#pragma once

// Projection f(E) = ReLU(W E + b) and the embedding fusion operators, each
// with a hand-written backward pass.
//
// Operators take a list of equally sized vectors (the projected embeddings)
// except concat, which takes raw embeddings of any size. Pairwise operators
// (multiply, quaternion, all) take exactly two.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "layerfuse/numeric.hpp"

namespace layerfuse {

class FusionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FusionMethod { kNone, kConcat, kSum, kMultiply, kHadamard, kQuaternion, kMoe, kAll };

std::string_view to_string(FusionMethod method);
/// Throws FusionError listing the valid names.
FusionMethod parse_fusion_method(std::string_view name);
std::string fusion_method_names();

/// True for methods whose output has the projected width and can therefore take a residual.
bool supports_residual(FusionMethod method);
/// True for methods that project their inputs before fusing.
bool uses_projection(FusionMethod method);

enum class AggregationMode { kMean, kMax, kMin };
std::string_view to_string(AggregationMode mode);
AggregationMode parse_aggregation_mode(std::string_view name);

struct FusionInput {
  std::string model;
  int layer = 0;
  bool operator==(const FusionInput&) const = default;
};

/// Declarative description of one fusion run.
///
/// `target_dim == 0` selects the default projected width: the smallest input
/// dim for sum/hadamard/moe, and 1024 (a 32x32 reshape) for
/// multiply/quaternion/all. `none` is a single embedding fed to the head as-is.
struct FusionSpec {
  FusionMethod method = FusionMethod::kConcat;
  bool residual = false;
  std::vector<FusionInput> inputs;
  std::size_t target_dim = 0;

  /// Structural checks that need no dims: input counts and residual availability.
  void validate() const;

  /// Projected width d_M for these input dims (0 for none/concat).
  std::size_t resolved_target_dim(std::span<const std::size_t> input_dims) const;
  /// Width of the vector handed to the classifier head.
  std::size_t fused_dim(std::span<const std::size_t> input_dims) const;

  bool operator==(const FusionSpec&) const = default;
};

void to_json(nlohmann::json& j, const FusionSpec& spec);
void from_json(const nlohmann::json& j, FusionSpec& spec);

inline constexpr std::size_t kDefaultPairwiseDim = 1024;

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void require_equal_dims(std::span<const std::vector<T>> xs, const char* op) {
  if (xs.empty()) throw FusionError(std::string(op) + ": no inputs");
  for (const auto& x : xs) {
    if (x.size() != xs[0].size()) {
      throw FusionError(std::string(op) + ": inputs differ in dim (" + std::to_string(xs[0].size()) + " vs " +
                        std::to_string(x.size()) + ")");
    }
  }
}

inline std::size_t square_side(std::size_t d) {
  auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
  return s * s == d ? s : 0;
}

}  // namespace detail

/// ReLU(W x + b).
template <typename T>
std::vector<T> project(std::span<const T> x, const DenseParams<T>& p) {
  auto y = linear_forward<T>(x, p);
  relu_inplace<T>(y);
  return y;
}

template <typename T>
std::vector<T> fuse_concat(std::span<const std::vector<T>> xs) {
  if (xs.size() < 2) throw FusionError("concat: needs at least 2 inputs");
  std::vector<T> out;
  for (const auto& x : xs) out.insert(out.end(), x.begin(), x.end());
  return out;
}

template <typename T>
std::vector<T> fuse_sum(std::span<const std::vector<T>> xs) {
  detail::require_equal_dims(xs, "sum");
  std::vector<T> out(xs[0].size(), T{0});
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
  return out;
}

template <typename T>
std::vector<T> fuse_hadamard(std::span<const std::vector<T>> xs) {
  detail::require_equal_dims(xs, "hadamard");
  std::vector<T> out(xs[0].begin(), xs[0].end());
  for (std::size_t k = 1; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= xs[k][i];
  }
  return out;
}

/// Reshape both to s x s (row-major), multiply, flatten row-major.
template <typename T>
std::vector<T> fuse_multiply(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw FusionError("multiply: inputs differ in dim");
  const std::size_t s = detail::square_side(a.size());
  if (s == 0) throw FusionError("multiply: dim " + std::to_string(a.size()) + " is not a perfect square");
  std::vector<T> out(a.size(), T{0});
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t k = 0; k < s; ++k) {
      const T ark = a[r * s + k];
      for (std::size_t c = 0; c < s; ++c) out[r * s + c] += ark * b[k * s + c];
    }
  }
  return out;
}

/// Hamilton product of q1 = (w, x, y, z) and q2, written into out.
template <typename T>
void hamilton_product(const T* q1, const T* q2, T* out) {
  const T a1 = q1[0], b1 = q1[1], c1 = q1[2], d1 = q1[3];
  const T a2 = q2[0], b2 = q2[1], c2 = q2[2], d2 = q2[3];
  out[0] = a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2;
  out[1] = a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2;
  out[2] = a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2;
  out[3] = a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2;
}

/// Blockwise Hamilton product over consecutive 4-element blocks.
template <typename T>
std::vector<T> fuse_quaternion(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw FusionError("quaternion: inputs differ in dim");
  if (a.size() % 4 != 0) throw FusionError("quaternion: dim " + std::to_string(a.size()) + " is not divisible by 4");
  std::vector<T> out(a.size());
  for (std::size_t k = 0; k < a.size(); k += 4) hamilton_product(a.data() + k, b.data() + k, out.data() + k);
  return out;
}

template <typename T>
struct MoEParams {
  std::vector<DenseParams<T>> experts;  // one per input, d_M -> d_M
  DenseParams<T> gate;                  // n * d_M -> n

  MoEParams() = default;
  MoEParams(std::size_t n_inputs, std::size_t dim) : experts(n_inputs, DenseParams<T>(dim, dim)), gate(n_inputs, n_inputs * dim) {}

  bool operator==(const MoEParams&) const = default;
};

template <typename T>
struct MoECache {
  std::vector<T> gate_input;
  std::vector<T> weights;  // softmax gate output
  std::vector<std::vector<T>> expert_pre;
  std::vector<std::vector<T>> expert_out;
};

/// g = softmax(gate(concat(xs))); output = sum_i g_i * relu(expert_i(x_i)).
template <typename T>
std::vector<T> fuse_moe(std::span<const std::vector<T>> xs, const MoEParams<T>& p, MoECache<T>* cache = nullptr) {
  detail::require_equal_dims(xs, "moe");
  if (p.experts.size() != xs.size()) {
    throw FusionError("moe: " + std::to_string(p.experts.size()) + " experts for " + std::to_string(xs.size()) +
                      " inputs");
  }
  MoECache<T> local;
  MoECache<T>& c = cache ? *cache : local;
  c.gate_input.clear();
  for (const auto& x : xs) c.gate_input.insert(c.gate_input.end(), x.begin(), x.end());
  const auto logits = linear_forward<T>(c.gate_input, p.gate);
  c.weights = softmax<T>(logits);
  c.expert_pre.resize(xs.size());
  c.expert_out.resize(xs.size());
  std::vector<T> out(xs[0].size(), T{0});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    c.expert_pre[i] = linear_forward<T>(xs[i], p.experts[i]);
    c.expert_out[i] = relu<T>(c.expert_pre[i]);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += c.weights[i] * c.expert_out[i][k];
  }
  return out;
}

/// Sum, hadamard, multiply and quaternion of the same pair, concatenated in that order.
template <typename T>
std::vector<T> fuse_all(std::span<const std::vector<T>> xs) {
  if (xs.size() != 2) throw FusionError("all: needs exactly 2 inputs, got " + std::to_string(xs.size()));
  const auto s = fuse_sum(xs);
  const auto h = fuse_hadamard(xs);
  const auto m = fuse_multiply<T>(xs[0], xs[1]);
  const auto q = fuse_quaternion<T>(xs[0], xs[1]);
  std::vector<T> out;
  out.reserve(4 * s.size());
  for (const auto* block : {&s, &h, &m, &q}) out.insert(out.end(), block->begin(), block->end());
  return out;
}

/// fused + (1/n) * sum_i projected_i.
template <typename T>
std::vector<T> apply_residual(std::span<const T> fused, std::span<const std::vector<T>> projected) {
  detail::require_equal_dims(projected, "residual");
  if (fused.size() != projected[0].size()) {
    throw FusionError("residual: fused dim " + std::to_string(fused.size()) + " differs from projected dim " +
                      std::to_string(projected[0].size()) +
                      "; residual enhancement is only available for methods that keep the projected width, "
                      "use the non-residual variant");
  }
  const T inv_n = T{1} / static_cast<T>(projected.size());
  std::vector<T> out(fused.begin(), fused.end());
  for (const auto& p : projected) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += inv_n * p[i];
  }
  return out;
}

/// Elementwise mean / max / min across layers. The mean is accumulated in
/// double, so k identical layers average back to the same values exactly.
template <typename T>
std::vector<T> aggregate_layers(std::span<const std::vector<T>> layers, AggregationMode mode) {
  if (layers.empty()) throw FusionError("aggregate_layers: empty layer list");
  detail::require_equal_dims(layers, "aggregate_layers");
  const std::size_t d = layers[0].size();
  std::vector<T> out(layers[0].begin(), layers[0].end());
  if (mode == AggregationMode::kMean) {
    std::vector<double> acc(out.begin(), out.end());
    for (std::size_t k = 1; k < layers.size(); ++k) {
      for (std::size_t i = 0; i < d; ++i) acc[i] += static_cast<double>(layers[k][i]);
    }
    const double n = static_cast<double>(layers.size());
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<T>(acc[i] / n);
    return out;
  }
  for (std::size_t k = 1; k < layers.size(); ++k) {
    for (std::size_t i = 0; i < d; ++i) {
      const T v = layers[k][i];
      out[i] = mode == AggregationMode::kMax ? std::max(out[i], v) : std::min(out[i], v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward passes. Each returns the gradient with respect to every input.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<std::vector<T>> fuse_concat_backward(std::span<const std::size_t> dims, std::span<const T> dy) {
  std::vector<std::vector<T>> out;
  std::size_t off = 0;
  for (std::size_t d : dims) {
    out.emplace_back(dy.begin() + off, dy.begin() + off + d);
    off += d;
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> fuse_sum_backward(std::size_t n_inputs, std::span<const T> dy) {
  return std::vector<std::vector<T>>(n_inputs, std::vector<T>(dy.begin(), dy.end()));
}

template <typename T>
std::vector<std::vector<T>> fuse_hadamard_backward(std::span<const std::vector<T>> xs, std::span<const T> dy) {
  std::vector<std::vector<T>> out(xs.size(), std::vector<T>(dy.begin(), dy.end()));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (j == i) continue;
      for (std::size_t k = 0; k < dy.size(); ++k) out[i][k] *= xs[j][k];
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> fuse_multiply_backward(std::span<const T> a, std::span<const T> b, std::span<const T> dy) {
  const std::size_t s = detail::square_side(a.size());
  std::vector<std::vector<T>> out(2, std::vector<T>(a.size(), T{0}));
  auto& da = out[0];
  auto& db = out[1];
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t k = 0; k < s; ++k) {
      T acc{0};
      const T ark = a[r * s + k];
      for (std::size_t c = 0; c < s; ++c) {
        acc += dy[r * s + c] * b[k * s + c];  // dA = dC B^T
        db[k * s + c] += ark * dy[r * s + c];  // dB = A^T dC
      }
      da[r * s + k] = acc;
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> fuse_quaternion_backward(std::span<const T> a, std::span<const T> b,
                                                     std::span<const T> dy) {
  std::vector<std::vector<T>> out(2, std::vector<T>(a.size()));
  for (std::size_t k = 0; k < a.size(); k += 4) {
    const T conj_a[4] = {a[k], -a[k + 1], -a[k + 2], -a[k + 3]};
    const T conj_b[4] = {b[k], -b[k + 1], -b[k + 2], -b[k + 3]};
    hamilton_product(dy.data() + k, conj_b, out[0].data() + k);  // d/da = dy (x) conj(b)
    hamilton_product(conj_a, dy.data() + k, out[1].data() + k);  // d/db = conj(a) (x) dy
  }
  return out;
}

/// Accumulates parameter gradients into `grad` and returns input gradients.
template <typename T>
std::vector<std::vector<T>> fuse_moe_backward(std::span<const std::vector<T>> xs, const MoEParams<T>& p,
                                              const MoECache<T>& c, std::span<const T> dy, MoEParams<T>& grad) {
  const std::size_t n = xs.size();
  const std::size_t d = dy.size();
  std::vector<T> dweights(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc{0};
    for (std::size_t k = 0; k < d; ++k) acc += dy[k] * c.expert_out[i][k];
    dweights[i] = acc;
  }
  T mean{0};
  for (std::size_t i = 0; i < n; ++i) mean += c.weights[i] * dweights[i];
  std::vector<T> dlogits(n);
  for (std::size_t i = 0; i < n; ++i) dlogits[i] = c.weights[i] * (dweights[i] - mean);

  std::vector<T> dgate_input(c.gate_input.size());
  linear_backward<T>(c.gate_input, p.gate, dlogits, grad.gate, dgate_input);

  std::vector<std::vector<T>> dxs(n, std::vector<T>(d));
  std::vector<T> dpre(d);
  std::vector<T> dx(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) dpre[k] = c.weights[i] * dy[k];
    relu_backward_inplace<T>(c.expert_pre[i], dpre);
    linear_backward<T>(xs[i], p.experts[i], dpre, grad.experts[i], dx);
    for (std::size_t k = 0; k < d; ++k) dxs[i][k] = dx[k] + dgate_input[i * d + k];
  }
  return dxs;
}

template <typename T>
std::vector<std::vector<T>> fuse_all_backward(std::span<const std::vector<T>> xs, std::span<const T> dy) {
  const std::size_t d = xs[0].size();
  auto block = [&](std::size_t b) { return dy.subspan(b * d, d); };
  auto out = fuse_sum_backward<T>(2, block(0));
  const auto h = fuse_hadamard_backward<T>(xs, block(1));
  const auto m = fuse_multiply_backward<T>(xs[0], xs[1], block(2));
  const auto q = fuse_quaternion_backward<T>(xs[0], xs[1], block(3));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < d; ++k) out[i][k] += h[i][k] + m[i][k] + q[i][k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// FusionLayer: projections + operator + optional residual, as one unit.
// ---------------------------------------------------------------------------

template <typename T>
struct FusionParams {
  std::vector<DenseParams<T>> projections;  // empty for none / concat
  std::optional<MoEParams<T>> moe;

  template <typename F>
  void for_each_dense(F&& f) {
    for (auto& p : projections) f(p);
    if (moe) {
      for (auto& e : moe->experts) f(e);
      f(moe->gate);
    }
  }
  template <typename F>
  void for_each_dense(F&& f) const {
    for (const auto& p : projections) f(p);
    if (moe) {
      for (const auto& e : moe->experts) f(e);
      f(moe->gate);
    }
  }

  bool operator==(const FusionParams&) const = default;
};

template <typename T>
struct FusionCache {
  std::vector<std::vector<T>> pre;   // projection pre-activations
  std::vector<std::vector<T>> proj;  // projected inputs
  MoECache<T> moe;
  std::vector<T> out;
};

template <typename T>
class FusionLayer {
 public:
  FusionLayer() = default;

  FusionLayer(FusionSpec spec, std::vector<std::size_t> input_dims)
      : spec_(std::move(spec)), input_dims_(std::move(input_dims)) {
    spec_.validate();
    if (input_dims_.size() != spec_.inputs.size()) {
      throw FusionError("fusion: " + std::to_string(input_dims_.size()) + " input dims for " +
                        std::to_string(spec_.inputs.size()) + " inputs");
    }
    target_dim_ = spec_.resolved_target_dim(input_dims_);
    output_dim_ = spec_.fused_dim(input_dims_);
  }

  const FusionSpec& spec() const { return spec_; }
  const std::vector<std::size_t>& input_dims() const { return input_dims_; }
  std::size_t target_dim() const { return target_dim_; }
  std::size_t output_dim() const { return output_dim_; }

  /// Zero-filled parameters of the right shapes.
  FusionParams<T> make_params() const {
    FusionParams<T> p;
    if (uses_projection(spec_.method)) {
      for (std::size_t d : input_dims_) p.projections.emplace_back(target_dim_, d);
    }
    if (spec_.method == FusionMethod::kMoe) p.moe.emplace(input_dims_.size(), target_dim_);
    return p;
  }

  void init(FusionParams<T>& p, Rng& rng) const {
    p = make_params();
    p.for_each_dense([&](DenseParams<T>& d) { init_uniform(d, rng); });
  }

  void forward(const FusionParams<T>& p, std::span<const std::span<const T>> xs, FusionCache<T>& c) const {
    if (xs.size() != input_dims_.size()) throw FusionError("fusion: wrong number of inputs");
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].size() != input_dims_[i]) {
        throw FusionError("fusion: input " + std::to_string(i) + " has dim " + std::to_string(xs[i].size()) +
                          ", expected " + std::to_string(input_dims_[i]));
      }
    }
    switch (spec_.method) {
      case FusionMethod::kNone:
        c.out.assign(xs[0].begin(), xs[0].end());
        return;
      case FusionMethod::kConcat:
        c.out.clear();
        for (const auto& x : xs) c.out.insert(c.out.end(), x.begin(), x.end());
        return;
      default:
        break;
    }

    c.pre.resize(xs.size());
    c.proj.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      c.pre[i].resize(target_dim_);
      linear_forward<T>(xs[i], p.projections[i], c.pre[i]);
      c.proj[i] = relu<T>(c.pre[i]);
    }
    const std::span<const std::vector<T>> proj(c.proj);
    switch (spec_.method) {
      case FusionMethod::kSum: c.out = fuse_sum<T>(proj); break;
      case FusionMethod::kHadamard: c.out = fuse_hadamard<T>(proj); break;
      case FusionMethod::kMultiply: c.out = fuse_multiply<T>(proj[0], proj[1]); break;
      case FusionMethod::kQuaternion: c.out = fuse_quaternion<T>(proj[0], proj[1]); break;
      case FusionMethod::kMoe: c.out = fuse_moe<T>(proj, *p.moe, &c.moe); break;
      case FusionMethod::kAll: c.out = fuse_all<T>(proj); break;
      default: break;
    }
    if (spec_.residual) c.out = apply_residual<T>(c.out, proj);
  }

  /// Accumulates parameter gradients for the sample in `c` into `grad`.
  void backward(const FusionParams<T>& p, std::span<const std::span<const T>> xs, const FusionCache<T>& c,
                std::span<const T> dy, FusionParams<T>& grad) const {
    if (!uses_projection(spec_.method)) return;
    const std::span<const std::vector<T>> proj(c.proj);
    std::vector<std::vector<T>> dproj;
    switch (spec_.method) {
      case FusionMethod::kSum: dproj = fuse_sum_backward<T>(proj.size(), dy); break;
      case FusionMethod::kHadamard: dproj = fuse_hadamard_backward<T>(proj, dy); break;
      case FusionMethod::kMultiply: dproj = fuse_multiply_backward<T>(proj[0], proj[1], dy); break;
      case FusionMethod::kQuaternion: dproj = fuse_quaternion_backward<T>(proj[0], proj[1], dy); break;
      case FusionMethod::kMoe: dproj = fuse_moe_backward<T>(proj, *p.moe, c.moe, dy, *grad.moe); break;
      case FusionMethod::kAll: dproj = fuse_all_backward<T>(proj, dy); break;
      default: break;
    }
    if (spec_.residual) {
      const T inv_n = T{1} / static_cast<T>(proj.size());
      for (auto& g : dproj) {
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += inv_n * dy[k];
      }
    }
    for (std::size_t i = 0; i < proj.size(); ++i) {
      relu_backward_inplace<T>(c.pre[i], dproj[i]);
      linear_backward<T>(xs[i], p.projections[i], dproj[i], grad.projections[i], std::span<T>{});
    }
  }

 private:
  FusionSpec spec_;
  std::vector<std::size_t> input_dims_;
  std::size_t target_dim_ = 0;
  std::size_t output_dim_ = 0;
};

}  // namespace layerfuse
