#pragma once

// Experiment drivers: layer sweeps, multi-layer aggregation sweeps, two-model
// fusion grids and N-model concatenation sweeps.
//
// Every cell trains its own model with a seed derived from the global seed
// and a canonical cell key, so results do not depend on cell order or on the
// number of worker threads.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "layerfuse/classifier.hpp"
#include "layerfuse/embed_store.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/report.hpp"

namespace layerfuse {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Default worker count: $LAYERFUSE_THREADS if set and positive, else 1.
std::size_t default_threads();

struct ExperimentOptions {
  TrainConfig train;         // train.seed is the global seed
  std::size_t threads = 0;   // 0 = default_threads()
  std::string dataset;       // empty = the manifest's only dataset
};

/// Lazily loads and caches matrices referenced by a manifest. Safe to share
/// between worker threads; cached matrices are immutable.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(Manifest manifest);

  const Manifest& manifest() const { return manifest_; }

  /// `requested`, or the only dataset when empty.
  std::string resolve_dataset(std::string_view requested) const;
  /// Integer layer or "last" (the model's highest layer in the train split).
  int resolve_layer(std::string_view dataset, std::string_view model, std::string_view token) const;
  int last_layer(std::string_view dataset, std::string_view model) const;

  std::shared_ptr<const EmbeddingMatrix> matrix(std::string_view dataset, Split split, std::string_view model,
                                                int layer);
  std::shared_ptr<const LabelVector> labels(Split split);

  /// Inputs and labels for a split. Throws ExperimentError when a file is missing.
  Dataset load(std::string_view dataset, Split split, const std::vector<FusionInput>& inputs);
  /// One input formed by aggregating the given layers of `model`.
  Dataset load_aggregated(std::string_view dataset, Split split, std::string_view model,
                          const std::vector<int>& layers, AggregationMode mode);

 private:
  Manifest manifest_;
  std::mutex mutex_;
  std::map<std::tuple<std::string, Split, std::string, int>, std::shared_ptr<const EmbeddingMatrix>> cache_;
  std::map<Split, std::shared_ptr<const LabelVector>> labels_;
};

/// One training run of a grid.
struct Cell {
  FusionSpec spec;
  std::optional<AggregationMode> aggregation;  // with k > 1: aggregate the last k layers of the single input
  std::size_t k = 1;
};

/// Canonical key over dataset, method, residual, target dim and inputs. The
/// aggregation mode and k are left out, so aggregation variants of one input
/// share their initialization and shuffling and differ only in the data.
std::string cell_key(std::string_view dataset, const Cell& cell);
std::uint64_t cell_seed(std::uint64_t global_seed, std::string_view key);

/// Trains and evaluates one cell. Precondition violations become error rows.
SweepRow run_cell(EmbeddingStore& store, const std::string& dataset, const Cell& cell,
                  const ExperimentOptions& options);
/// Runs cells on a worker pool; rows come back in cell order.
std::vector<SweepRow> run_cells(EmbeddingStore& store, const std::string& dataset, const std::vector<Cell>& cells,
                                const ExperimentOptions& options);

/// One row per available layer of `model`, ascending.
SweepResult layer_sweep(EmbeddingStore& store, const std::string& model, const ExperimentOptions& options);

/// One row per (k, mode), k ascending then modes in the given order. k values
/// above the available depth are dropped.
SweepResult multi_layer_sweep(EmbeddingStore& store, const std::string& model, const std::vector<std::size_t>& ks,
                              const std::vector<AggregationMode>& modes, const ExperimentOptions& options);

struct PairGrid {
  std::string model_a;
  std::string model_b;
  std::vector<int> layers_a;
  std::vector<int> layers_b;
  std::vector<FusionMethod> methods;
  std::vector<bool> residual = {false};
  std::size_t target_dim = 0;
};

/// Rows ordered by (layer_a, layer_b, method, residual).
SweepResult pair_fusion_grid(EmbeddingStore& store, const PairGrid& grid, const ExperimentOptions& options);

struct SizeStats {
  std::size_t size = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over successful rows
};

struct ComboResult {
  SweepResult result;
  std::vector<SizeStats> per_size;
};

/// Concatenation of every subset of each requested size, in lexicographic
/// order of model positions. Layers default to each model's last layer.
ComboResult combo_sweep(EmbeddingStore& store, const std::vector<std::string>& models,
                        const std::vector<std::size_t>& sizes, const ExperimentOptions& options,
                        const std::map<std::string, int>& layer_overrides = {});

}  // namespace layerfuse
