#pragma once

// MLP classification head on top of a FusionLayer, trained end to end with
// softmax cross-entropy and Adam.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "layerfuse/embed_store.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/numeric.hpp"

namespace layerfuse {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 100;
  double lr = 1e-4;
  std::size_t epochs = 120;
  std::size_t hidden = 256;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

template <typename T>
struct MLPParams {
  DenseParams<T> layer1;  // d_in -> hidden
  DenseParams<T> layer2;  // hidden -> n_classes
  bool operator==(const MLPParams&) const = default;
};

template <typename T>
struct NetworkParams {
  FusionParams<T> fusion;
  MLPParams<T> mlp;

  /// Visits every affine block in a fixed order: projections, MoE experts, MoE gate, MLP layers.
  template <typename F>
  void for_each_dense(F&& f) {
    fusion.for_each_dense(f);
    f(mlp.layer1);
    f(mlp.layer2);
  }
  template <typename F>
  void for_each_dense(F&& f) const {
    fusion.for_each_dense(f);
    f(mlp.layer1);
    f(mlp.layer2);
  }

  std::size_t size() const {
    std::size_t n = 0;
    for_each_dense([&](const DenseParams<T>& d) { n += d.size(); });
    return n;
  }

  void zero() {
    for_each_dense([](DenseParams<T>& d) { d.zero(); });
  }

  /// Weight and bias of every block, in visiting order.
  std::vector<std::span<T>> tensors() {
    std::vector<std::span<T>> out;
    for_each_dense([&](DenseParams<T>& d) {
      out.emplace_back(d.weight);
      out.emplace_back(d.bias);
    });
    return out;
  }
  std::vector<std::span<const T>> tensors() const {
    std::vector<std::span<const T>> out;
    for_each_dense([&](const DenseParams<T>& d) {
      out.emplace_back(d.weight);
      out.emplace_back(d.bias);
    });
    return out;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(size());
    for (auto t : tensors()) flat.insert(flat.end(), t.begin(), t.end());
    return flat;
  }

  void unflatten(std::span<const T> flat) {
    if (flat.size() != size()) throw ShapeError("unflatten: size mismatch");
    std::size_t off = 0;
    for (auto t : tensors()) {
      std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.begin());
      off += t.size();
    }
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (const auto& p : fusion.projections) out.fusion.projections.push_back(p.template cast<U>());
    if (fusion.moe) {
      MoEParams<U> moe;
      for (const auto& e : fusion.moe->experts) moe.experts.push_back(e.template cast<U>());
      moe.gate = fusion.moe->gate.template cast<U>();
      out.fusion.moe = std::move(moe);
    }
    out.mlp.layer1 = mlp.layer1.template cast<U>();
    out.mlp.layer2 = mlp.layer2.template cast<U>();
    return out;
  }

  bool operator==(const NetworkParams&) const = default;
};

template <typename T>
struct NetworkCache {
  FusionCache<T> fusion;
  std::vector<T> h_pre;
  std::vector<T> h;
  std::vector<T> logits;
};

/// Projection -> fusion -> Linear -> ReLU -> Linear.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(FusionSpec spec, std::vector<std::size_t> input_dims, std::size_t n_classes, std::size_t hidden)
      : fusion_(std::move(spec), std::move(input_dims)), n_classes_(n_classes), hidden_(hidden) {
    if (n_classes_ < 2) throw ShapeError("network: need at least 2 classes");
    if (hidden_ < 1) throw ShapeError("network: hidden width must be at least 1");
  }

  const FusionLayer<T>& fusion() const { return fusion_; }
  std::size_t n_classes() const { return n_classes_; }
  std::size_t hidden() const { return hidden_; }

  NetworkParams<T> make_params() const {
    NetworkParams<T> p;
    p.fusion = fusion_.make_params();
    p.mlp.layer1 = DenseParams<T>(hidden_, fusion_.output_dim());
    p.mlp.layer2 = DenseParams<T>(n_classes_, hidden_);
    return p;
  }

  void init(NetworkParams<T>& p, Rng& rng) const {
    p = make_params();
    p.for_each_dense([&](DenseParams<T>& d) { init_uniform(d, rng); });
  }

  std::span<const T> forward(const NetworkParams<T>& p, std::span<const std::span<const T>> xs,
                             NetworkCache<T>& c) const {
    fusion_.forward(p.fusion, xs, c.fusion);
    c.h_pre.resize(hidden_);
    linear_forward<T>(c.fusion.out, p.mlp.layer1, c.h_pre);
    c.h.assign(c.h_pre.begin(), c.h_pre.end());
    relu_inplace<T>(c.h);
    c.logits.resize(n_classes_);
    linear_forward<T>(c.h, p.mlp.layer2, c.logits);
    return c.logits;
  }

  /// Accumulates gradients for one sample (whose forward pass filled `c`) into `grad`.
  void backward(const NetworkParams<T>& p, std::span<const std::span<const T>> xs, const NetworkCache<T>& c,
                std::span<const T> dlogits, NetworkParams<T>& grad) const {
    std::vector<T> dh(hidden_);
    linear_backward<T>(c.h, p.mlp.layer2, dlogits, grad.mlp.layer2, dh);
    relu_backward_inplace<T>(c.h_pre, dh);
    const bool needs_dfused = uses_projection(fusion_.spec().method);
    std::vector<T> dfused(needs_dfused ? fusion_.output_dim() : 0);
    linear_backward<T>(c.fusion.out, p.mlp.layer1, dh, grad.mlp.layer1, dfused);
    if (needs_dfused) fusion_.backward(p.fusion, xs, c.fusion, dfused, grad.fusion);
  }

  /// Cross-entropy loss of one sample; gradients scaled by `scale` are accumulated into `grad`.
  T loss_and_grad(const NetworkParams<T>& p, std::span<const std::span<const T>> xs, std::size_t label,
                  NetworkCache<T>& c, NetworkParams<T>& grad, T scale = T{1}) const {
    const auto logits = forward(p, xs, c);
    auto lg = softmax_cross_entropy<T>(logits, label);
    for (auto& g : lg.grad) g *= scale;
    backward(p, xs, c, lg.grad, grad);
    return lg.loss;
  }

 private:
  FusionLayer<T> fusion_;
  std::size_t n_classes_ = 0;
  std::size_t hidden_ = 0;
};

/// Aligned inputs for one split: one matrix per fusion input plus labels.
struct Dataset {
  std::vector<std::shared_ptr<const EmbeddingMatrix>> inputs;
  std::shared_ptr<const LabelVector> labels;

  std::size_t size() const { return labels ? labels->n_samples() : 0; }
  std::size_t n_classes() const { return labels ? labels->n_classes : 0; }
  std::vector<std::size_t> dims() const;
  /// Throws TrainingError if inputs and labels are not aligned.
  void validate() const;
  std::vector<std::span<const float>> sample(std::size_t i) const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainedModel {
  FusionSpec spec;
  std::vector<std::size_t> input_dims;
  std::size_t n_classes = 0;
  TrainConfig config;
  NetworkParams<float> params;
  AdamState<float> optimizer;
  std::vector<EpochStats> history;

  Network<float> network() const { return {spec, input_dims, n_classes, config.hidden}; }
  std::size_t fused_dim() const { return spec.fused_dim(input_dims); }

  bool operator==(const TrainedModel&) const = default;
};

/// Untrained model; the same seed yields bit-identical parameters.
TrainedModel init_model(const FusionSpec& spec, std::span<const std::size_t> input_dims, std::size_t n_classes,
                        const TrainConfig& config, std::uint64_t seed);
/// Single-embedding model (fusion method `none`).
TrainedModel init_model(std::size_t d_in, std::size_t n_classes, const TrainConfig& config, std::uint64_t seed);

/// epochs x ceil(N / batch_size) Adam steps over per-epoch shuffled mini-batches.
/// The final partial batch is kept.
TrainedModel train(const Dataset& data, const TrainConfig& config, const FusionSpec& spec);

/// Runs the same loop starting from an existing model (used for init -> train splits in tests).
void train_in_place(TrainedModel& model, const Dataset& data);

std::vector<float> predict_logits(const TrainedModel& model, std::span<const std::span<const float>> inputs);
/// Argmax of the logits; ties go to the lowest class id.
std::size_t predict(const TrainedModel& model, std::span<const std::span<const float>> inputs);
std::vector<std::size_t> predict_all(const TrainedModel& model, const Dataset& data);
double evaluate(const TrainedModel& model, const Dataset& data);

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);

/// CSV with header "epoch,loss,train_acc".
void write_history_csv(const TrainedModel& model, const std::filesystem::path& path);

}  // namespace layerfuse
