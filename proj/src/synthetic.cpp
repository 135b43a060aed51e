#include "layerfuse/synthetic.hpp"

#include <cmath>
#include <stdexcept>

#include "layerfuse/random.hpp"

namespace layerfuse {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMeansStream = 0x5100;
constexpr std::uint64_t kLabelStream = 0x5200;
constexpr std::uint64_t kModelStream = 0x5300;
constexpr std::uint64_t kSampleStream = 0x5400;

template <typename V>
const V& per_model(const std::vector<V>& values, std::size_t m) {
  return values.size() == 1 ? values[0] : values.at(m);
}

void check_per_model(std::size_t size, std::size_t n_models, const char* field) {
  if (size != 1 && size != n_models) {
    throw std::invalid_argument(std::string(field) + ": expected 1 or " + std::to_string(n_models) +
                                " values, got " + std::to_string(size));
  }
}

// Smallest b with b^n >= c.
std::size_t digit_base(std::size_t c, std::size_t n) {
  std::size_t b = 1;
  for (;;) {
    std::size_t p = 1;
    for (std::size_t i = 0; i < n && p < c; ++i) p *= b;
    if (p >= c) return b;
    ++b;
  }
}

struct ModelView {
  std::vector<double> mixing;  // dim x latent
  std::vector<double> mask;    // latent
};

std::vector<std::uint32_t> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(i % classes);
  const auto perm = rng.permutation(n);
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = labels[perm[i]];
  return out;
}

}  // namespace

std::string_view to_string(FeatureLayout layout) {
  switch (layout) {
    case FeatureLayout::kShared: return "shared";
    case FeatureLayout::kDisjoint: return "disjoint";
    case FeatureLayout::kOverlap: return "overlap";
  }
  return "?";
}

FeatureLayout parse_feature_layout(std::string_view text) {
  if (text == "shared") return FeatureLayout::kShared;
  if (text == "disjoint") return FeatureLayout::kDisjoint;
  if (text == "overlap") return FeatureLayout::kOverlap;
  throw std::invalid_argument("unknown feature layout '" + std::string(text) + "'; valid: shared, disjoint, overlap");
}

std::string SyntheticSpec::model_name(std::size_t m) const {
  return model_names.empty() ? "m" + std::to_string(m) : model_names.at(m);
}
std::size_t SyntheticSpec::layers_of(std::size_t m) const { return per_model(layers, m); }
std::size_t SyntheticSpec::dim_of(std::size_t m) const { return per_model(dims, m); }
std::size_t SyntheticSpec::peak_of(std::size_t m) const { return per_model(peak_layers, m); }

void SyntheticSpec::validate() const {
  if (dataset.empty()) throw std::invalid_argument("dataset: must not be empty");
  if (n_models < 1) throw std::invalid_argument("n_models: must be at least 1");
  if (!model_names.empty() && model_names.size() != n_models) {
    throw std::invalid_argument("model_names: expected " + std::to_string(n_models) + " names");
  }
  check_per_model(layers.size(), n_models, "layers");
  check_per_model(dims.size(), n_models, "dims");
  check_per_model(peak_layers.size(), n_models, "peak_layers");
  for (std::size_t m = 0; m < n_models; ++m) {
    if (layers_of(m) < 1) throw std::invalid_argument("layers: must be at least 1");
    if (dim_of(m) < 1) throw std::invalid_argument("dims: must be at least 1");
    if (peak_of(m) < 1 || peak_of(m) > layers_of(m)) {
      throw std::invalid_argument("peak_layers: " + std::to_string(peak_of(m)) + " is outside 1.." +
                                  std::to_string(layers_of(m)));
    }
  }
  if (n_train < 1) throw std::invalid_argument("n_train: must be at least 1");
  if (n_classes < 2) throw std::invalid_argument("n_classes: must be at least 2");
  if (latent_dim < 1) throw std::invalid_argument("latent_dim: must be at least 1");
  if (layout == FeatureLayout::kDisjoint && latent_dim < n_models) {
    throw std::invalid_argument("latent_dim: disjoint layout needs at least one coordinate per model");
  }
  if (!(noise >= 0.0) || !(nuisance >= 0.0)) throw std::invalid_argument("noise: must be non-negative");
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw std::invalid_argument("layer_decay: must be in (0, 1]");
  if (!(final_layer_penalty >= 0.0 && final_layer_penalty <= 1.0)) {
    throw std::invalid_argument("final_layer_penalty: must be in [0, 1]");
  }
  if (!(overlap_fraction > 0.0 && overlap_fraction <= 1.0)) {
    throw std::invalid_argument("overlap_fraction: must be in (0, 1]");
  }
}

Manifest gen_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  const std::size_t latent = spec.latent_dim;
  const std::size_t C = spec.n_classes;
  const std::size_t M = spec.n_models;

  // Class means in latent space.
  std::vector<std::vector<double>> means(C, std::vector<double>(latent));
  Rng mean_rng(mix_seed(spec.seed, kMeansStream));
  if (spec.layout == FeatureLayout::kDisjoint) {
    const std::size_t base = digit_base(C, M);
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t lo = m * latent / M;
      const std::size_t hi = (m + 1) * latent / M;
      std::vector<std::vector<double>> digit_means(base, std::vector<double>(hi - lo));
      for (auto& v : digit_means) {
        for (auto& x : v) x = mean_rng.normal();
      }
      std::size_t place = 1;
      for (std::size_t i = 0; i < m; ++i) place *= base;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t digit = (c / place) % base;
        for (std::size_t j = lo; j < hi; ++j) means[c][j] = digit_means[digit][j - lo];
      }
    }
  } else {
    for (auto& mu : means) {
      for (auto& x : mu) x = mean_rng.normal();
    }
  }

  std::vector<ModelView> views(M);
  for (std::size_t m = 0; m < M; ++m) {
    Rng rng(mix_seed(spec.seed, kModelStream + m));
    auto& v = views[m];
    v.mask.assign(latent, 0.0);
    switch (spec.layout) {
      case FeatureLayout::kShared:
        std::fill(v.mask.begin(), v.mask.end(), 1.0);
        break;
      case FeatureLayout::kDisjoint:
        for (std::size_t j = m * latent / M; j < (m + 1) * latent / M; ++j) v.mask[j] = 1.0;
        break;
      case FeatureLayout::kOverlap: {
        const auto keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::lround(spec.overlap_fraction * static_cast<double>(latent))));
        const auto perm = rng.permutation(latent);
        for (std::size_t j = 0; j < keep; ++j) v.mask[perm[j]] = 1.0;
        break;
      }
    }
    const std::size_t d = spec.dim_of(m);
    const double scale = 1.0 / std::sqrt(static_cast<double>(latent));
    v.mixing.resize(d * latent);
    for (auto& a : v.mixing) a = rng.normal() * scale;
  }

  Manifest manifest;
  manifest.base_dir = out_dir;
  fs::create_directories(out_dir);

  Rng label_rng(mix_seed(spec.seed, kLabelStream));
  std::vector<std::pair<Split, std::size_t>> splits = {{Split::kTrain, spec.n_train}};
  if (spec.n_test > 0) splits.emplace_back(Split::kTest, spec.n_test);

  for (const auto& [split, n] : splits) {
    LabelVector lv;
    lv.n_classes = C;
    lv.labels = balanced_labels(n, C, label_rng);
    const fs::path label_rel = "labels_" + std::string(to_string(split)) + ".lbl";
    write_label_file(lv, out_dir / label_rel);
    manifest.labels[split] = label_rel;

    for (std::size_t m = 0; m < M; ++m) {
      const auto& view = views[m];
      const std::size_t d = spec.dim_of(m);
      const std::size_t top = spec.layers_of(m);
      const std::size_t peak = spec.peak_of(m);
      const std::string name = spec.model_name(m);
      fs::create_directories(out_dir / name);
      for (std::size_t L = 0; L <= top; ++L) {
        double q = std::pow(spec.layer_decay, std::abs(static_cast<double>(L) - static_cast<double>(peak)));
        if (L == top && L != peak) q *= 1.0 - spec.final_layer_penalty;
        Rng rng(mix_seed(spec.seed, stable_hash(name + "/" + std::to_string(L) + "/" + std::string(to_string(split))) ^
                                        kSampleStream));
        EmbeddingMatrix mat(n, d);
        std::vector<double> u(latent);
        for (std::size_t i = 0; i < n; ++i) {
          const auto& mu = means[lv.labels[i]];
          for (std::size_t j = 0; j < latent; ++j) {
            u[j] = view.mask[j] * (q * mu[j] + (1.0 - q) * spec.nuisance * rng.normal());
          }
          auto row = mat.row(i);
          for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            const double* a = view.mixing.data() + r * latent;
            for (std::size_t j = 0; j < latent; ++j) acc += a[j] * u[j];
            row[r] = static_cast<float>(acc + spec.noise * rng.normal());
          }
        }
        const fs::path rel = fs::path(name) / ("layer_" + std::to_string(L) + "_" + std::string(to_string(split)) + ".lef");
        write_embedding_file(mat, out_dir / rel);
        manifest.entries.push_back({spec.dataset, split, name, static_cast<int>(L), d, n, rel});
      }
    }
  }

  manifest.metadata = {{"generator", "synthetic"},
                       {"seed", spec.seed},
                       {"n_classes", C},
                       {"layout", to_string(spec.layout)},
                       {"noise", spec.noise},
                       {"layer_decay", spec.layer_decay}};
  nlohmann::json peaks = nlohmann::json::object();
  for (std::size_t m = 0; m < M; ++m) peaks[spec.model_name(m)] = spec.peak_of(m);
  manifest.metadata["peak_layers"] = std::move(peaks);
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace layerfuse
