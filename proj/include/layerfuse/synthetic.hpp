#pragma once

// Deterministic synthetic embedding stores with planted structure.
//
// Each model m has a fixed random mixing matrix A_m (dim_m x latent_dim) and
// sees the latent space through a mask. A sample with label y at layer L is
//
//   x = A_m (q * mask (.) mu_y + (1 - q) * nuisance * mask (.) n) + noise * z
//
// with q = layer_decay^|L - peak_m|, scaled by (1 - final_layer_penalty) at
// the last layer when that is not the peak. n and z are fresh standard
// normals per (sample, model, layer).
//
// Layouts:
//   shared    every model sees the whole latent space.
//   disjoint  the latent space is split into one block per model; block m
//             of mu_c depends only on digit m of c in base ceil(C^(1/M)),
//             so no single model can separate all classes.
//   overlap   every model sees a random subset of the latent coordinates.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "layerfuse/embed_store.hpp"

namespace layerfuse {

enum class FeatureLayout { kShared, kDisjoint, kOverlap };

std::string_view to_string(FeatureLayout layout);
FeatureLayout parse_feature_layout(std::string_view text);

struct SyntheticSpec {
  std::string dataset = "synth";
  std::size_t n_models = 1;
  std::vector<std::string> model_names;  // defaults to m0, m1, ...
  // Per-model settings; a single value applies to every model.
  std::vector<std::size_t> layers = {12};  // files for layers 0..layers
  std::vector<std::size_t> dims = {32};
  std::vector<std::size_t> peak_layers = {8};

  std::size_t n_train = 400;
  std::size_t n_test = 200;
  std::size_t n_classes = 4;
  std::size_t latent_dim = 8;
  double noise = 0.1;
  double nuisance = 1.0;
  double layer_decay = 0.8;
  double final_layer_penalty = 0.0;
  FeatureLayout layout = FeatureLayout::kShared;
  double overlap_fraction = 0.5;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  std::string model_name(std::size_t m) const;
  std::size_t layers_of(std::size_t m) const;
  std::size_t dim_of(std::size_t m) const;
  std::size_t peak_of(std::size_t m) const;
};

/// Writes <out>/<model>/layer_<L>_<split>.lef, <out>/labels_<split>.lbl and
/// <out>/manifest.json. Returns the manifest as written.
Manifest gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace layerfuse
