#include "layerfuse/classifier.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace layerfuse {

namespace {

constexpr std::array<char, 4> kCheckpointMagic = {'L', 'C', 'K', '1'};
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr std::uint16_t kDtypeF32 = 1;

// Salts for the independent random streams of one training run.
constexpr std::uint64_t kInitSalt = 0x1000;
constexpr std::uint64_t kShuffleSalt = 0x2000;

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (hidden < 1) throw std::invalid_argument("hidden must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size}, {"lr", c.lr},     {"epochs", c.epochs},
                     {"hidden", c.hidden},         {"seed", c.seed}, {"shuffle", c.shuffle}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.hidden = j.value("hidden", d.hidden);
  c.seed = j.value("seed", d.seed);
  c.shuffle = j.value("shuffle", d.shuffle);
}

std::vector<std::size_t> Dataset::dims() const {
  std::vector<std::size_t> d;
  for (const auto& m : inputs) d.push_back(m->dim);
  return d;
}

void Dataset::validate() const {
  if (!labels) throw TrainingError("dataset has no labels");
  if (inputs.empty()) throw TrainingError("dataset has no inputs");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i]) throw TrainingError("dataset input " + std::to_string(i) + " is null");
    if (inputs[i]->n_samples != labels->n_samples()) {
      throw TrainingError("misaligned inputs: input " + std::to_string(i) + " has " +
                          std::to_string(inputs[i]->n_samples) + " samples but there are " +
                          std::to_string(labels->n_samples()) + " labels");
    }
  }
  if (labels->n_samples() == 0) throw TrainingError("dataset is empty");
}

std::vector<std::span<const float>> Dataset::sample(std::size_t i) const {
  std::vector<std::span<const float>> xs;
  xs.reserve(inputs.size());
  for (const auto& m : inputs) xs.push_back(m->row(i));
  return xs;
}

TrainedModel init_model(const FusionSpec& spec, std::span<const std::size_t> input_dims, std::size_t n_classes,
                        const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  TrainedModel model;
  model.spec = spec;
  model.input_dims.assign(input_dims.begin(), input_dims.end());
  model.n_classes = n_classes;
  model.config = config;
  model.config.seed = seed;
  model.optimizer.lr = config.lr;
  Rng rng(mix_seed(seed, kInitSalt));
  model.network().init(model.params, rng);
  return model;
}

TrainedModel init_model(std::size_t d_in, std::size_t n_classes, const TrainConfig& config, std::uint64_t seed) {
  FusionSpec spec;
  spec.method = FusionMethod::kNone;
  spec.inputs = {{"input", 0}};
  const std::size_t dims[] = {d_in};
  return init_model(spec, dims, n_classes, config, seed);
}

void train_in_place(TrainedModel& model, const Dataset& data) {
  data.validate();
  if (data.dims() != model.input_dims) throw TrainingError("dataset dims do not match the model");
  if (data.n_classes() != model.n_classes) throw TrainingError("dataset class count does not match the model");

  const TrainConfig& cfg = model.config;
  const Network<float> net = model.network();
  NetworkParams<float> grad = net.make_params();
  const auto param_views = model.params.tensors();
  std::vector<std::span<const float>> grad_views;
  for (auto t : grad.tensors()) grad_views.emplace_back(t);

  const std::size_t n = data.size();
  NetworkCache<float> cache;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      Rng rng(mix_seed(cfg.seed, kShuffleSalt + model.history.size()));
      order = rng.permutation(n);
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const float scale = 1.0f / static_cast<float>(end - start);
      grad.zero();
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto xs = data.sample(i);
        const std::size_t label = data.labels->labels[i];
        const float loss = net.loss_and_grad(model.params, xs, label, cache, grad, scale);
        batch_loss += loss;
        if (argmax<float>(cache.logits) == label) ++correct;
      }
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << model.history.size() + 1 << ", batch starting at " << start
            << " (method " << to_string(model.spec.method) << ", lr " << cfg.lr << ")";
        throw TrainingError(msg.str());
      }
      loss_sum += batch_loss;
      adam_step<float>(param_views, grad_views, model.optimizer);
    }
    model.history.push_back({model.history.size() + 1, loss_sum / static_cast<double>(n),
                             static_cast<double>(correct) / static_cast<double>(n)});
  }
}

TrainedModel train(const Dataset& data, const TrainConfig& config, const FusionSpec& spec) {
  data.validate();
  const auto dims = data.dims();
  TrainedModel model = init_model(spec, dims, data.n_classes(), config, config.seed);
  train_in_place(model, data);
  return model;
}

std::vector<float> predict_logits(const TrainedModel& model, std::span<const std::span<const float>> inputs) {
  NetworkCache<float> cache;
  const auto logits = model.network().forward(model.params, inputs, cache);
  return {logits.begin(), logits.end()};
}

std::size_t predict(const TrainedModel& model, std::span<const std::span<const float>> inputs) {
  const auto logits = predict_logits(model, inputs);
  return argmax<float>(logits);
}

std::vector<std::size_t> predict_all(const TrainedModel& model, const Dataset& data) {
  data.validate();
  if (data.dims() != model.input_dims) {
    throw ShapeError("evaluate: dataset dims do not match the model's input dims");
  }
  const Network<float> net = model.network();
  NetworkCache<float> cache;
  std::vector<std::size_t> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto xs = data.sample(i);
    out[i] = argmax<float>(net.forward(model.params, xs, cache));
  }
  return out;
}

double evaluate(const TrainedModel& model, const Dataset& data) {
  const auto pred = predict_all(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels->labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

nlohmann::json checkpoint_header(const TrainedModel& m) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : m.history) history.push_back({h.epoch, h.loss, h.train_accuracy});
  return nlohmann::json{{"fusion", m.spec},
                        {"input_dims", m.input_dims},
                        {"n_classes", m.n_classes},
                        {"train", m.config},
                        {"adam",
                         {{"lr", m.optimizer.lr},
                          {"beta1", m.optimizer.beta1},
                          {"beta2", m.optimizer.beta2},
                          {"eps", m.optimizer.eps},
                          {"t", m.optimizer.t}}},
                        {"history", std::move(history)}};
}

class Cursor {
 public:
  Cursor(const std::string& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw StoreError(StoreErrc::kTruncated, path_.string() + ": checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename U>
  U get() {
    return binio::get_le<U>(take(sizeof(U)));
  }
  void floats(std::span<float> out) { binio::get_f32_array(take(out.size_bytes()), out); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  const std::string header = checkpoint_header(model).dump();
  std::string bytes(kCheckpointMagic.begin(), kCheckpointMagic.end());
  binio::put_le<std::uint16_t>(bytes, kCheckpointVersion);
  binio::put_le<std::uint16_t>(bytes, kDtypeF32);
  binio::put_le<std::uint64_t>(bytes, header.size());
  bytes += header;

  const auto tensors = model.params.tensors();
  binio::put_le<std::uint64_t>(bytes, tensors.size());
  for (auto t : tensors) {
    binio::put_le<std::uint64_t>(bytes, t.size());
    binio::put_f32_array(bytes, t);
  }
  binio::put_le<std::uint64_t>(bytes, model.optimizer.m.size());
  binio::put_f32_array(bytes, model.optimizer.m);
  binio::put_f32_array(bytes, model.optimizer.v);
  binio::write_file(path, bytes);
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = binio::read_file(path);
  Cursor cur(bytes, path);
  const char* magic = cur.take(4);
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), magic)) {
    throw StoreError(StoreErrc::kBadMagic, path.string() + " is not a checkpoint");
  }
  if (cur.get<std::uint16_t>() != kCheckpointVersion) {
    throw StoreError(StoreErrc::kVersionMismatch, path.string() + ": unsupported checkpoint version");
  }
  if (cur.get<std::uint16_t>() != kDtypeF32) throw StoreError(StoreErrc::kBadDtype, path.string());
  const auto header_len = cur.get<std::uint64_t>();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(std::string_view(cur.take(header_len), header_len));
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(StoreErrc::kManifestFormat, path.string() + ": bad checkpoint header: " + e.what());
  }

  TrainedModel m;
  m.spec = h.at("fusion").get<FusionSpec>();
  m.input_dims = h.at("input_dims").get<std::vector<std::size_t>>();
  m.n_classes = h.at("n_classes").get<std::size_t>();
  m.config = h.at("train").get<TrainConfig>();
  const auto& adam = h.at("adam");
  m.optimizer.lr = adam.at("lr").get<double>();
  m.optimizer.beta1 = adam.at("beta1").get<double>();
  m.optimizer.beta2 = adam.at("beta2").get<double>();
  m.optimizer.eps = adam.at("eps").get<double>();
  m.optimizer.t = adam.at("t").get<std::int64_t>();
  for (const auto& row : h.at("history")) {
    m.history.push_back({row.at(0).get<std::size_t>(), row.at(1).get<double>(), row.at(2).get<double>()});
  }

  m.params = m.network().make_params();
  auto tensors = m.params.tensors();
  if (cur.get<std::uint64_t>() != tensors.size()) {
    throw StoreError(StoreErrc::kShape, path.string() + ": tensor count does not match the architecture");
  }
  for (auto t : tensors) {
    if (cur.get<std::uint64_t>() != t.size()) {
      throw StoreError(StoreErrc::kShape, path.string() + ": tensor size does not match the architecture");
    }
    cur.floats(t);
  }
  const auto moments = cur.get<std::uint64_t>();
  if (moments != 0 && moments != m.params.size()) {
    throw StoreError(StoreErrc::kShape, path.string() + ": optimizer state size mismatch");
  }
  m.optimizer.m.resize(moments);
  m.optimizer.v.resize(moments);
  cur.floats(m.optimizer.m);
  cur.floats(m.optimizer.v);
  if (!cur.done()) throw StoreError(StoreErrc::kShape, path.string() + ": trailing bytes");
  return m;
}

void write_history_csv(const TrainedModel& model, const std::filesystem::path& path) {
  std::string out = "epoch,loss,train_acc\n";
  char buf[96];
  for (const auto& h : model.history) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.4f\n", h.epoch, h.loss, h.train_accuracy);
    out += buf;
  }
  binio::write_file(path, out);
}

}  // namespace layerfuse
